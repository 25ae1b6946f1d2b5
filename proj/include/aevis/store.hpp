#pragma once

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace aevis {

/// Flat directory of documents named `<kind>.<id>.json`. Writes go through a
/// temporary file and a rename, so a reader never sees a torn document.
class DocumentStore {
 public:
  explicit DocumentStore(std::filesystem::path dir);

  const std::filesystem::path& dir() const noexcept { return dir_; }

  void put(std::string_view kind, std::string_view id, const std::string& bytes);
  std::optional<std::string> get(std::string_view kind, std::string_view id) const;
  /// Ids of every stored document of one kind, sorted.
  std::vector<std::string> ids(std::string_view kind) const;

  /// Ids are restricted to [A-Za-z0-9_-]+ so they can never escape the
  /// directory.
  static bool valid_id(std::string_view id);

 private:
  std::filesystem::path path(std::string_view kind, std::string_view id) const;

  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

}  // namespace aevis
