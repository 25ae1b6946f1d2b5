#include "aevis/store.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <sstream>

#include "aevis/error.hpp"

namespace aevis {

namespace fs = std::filesystem;

DocumentStore::DocumentStore(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error("io_error", "cannot create data directory " + dir_.string() + ": " + ec.message());
}

bool DocumentStore::valid_id(std::string_view id) {
  if (id.empty() || id.size() > 128) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

fs::path DocumentStore::path(std::string_view kind, std::string_view id) const {
  if (!valid_id(id)) throw ValidationError("invalid document id '" + std::string(id) + "'");
  return dir_ / (std::string(kind) + "." + std::string(id) + ".json");
}

void DocumentStore::put(std::string_view kind, std::string_view id, const std::string& bytes) {
  static std::atomic<unsigned long> counter{0};
  const fs::path target = path(kind, id);
  const fs::path tmp = target.string() + ".tmp" + std::to_string(counter++);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << bytes;
    out.flush();
    if (!out) throw Error("io_error", "cannot write " + tmp.string());
  }
  std::lock_guard lock(mu_);
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw Error("io_error", "cannot store " + target.string() + ": " + ec.message());
}

std::optional<std::string> DocumentStore::get(std::string_view kind, std::string_view id) const {
  if (!valid_id(id)) return std::nullopt;
  std::lock_guard lock(mu_);
  std::ifstream in(path(kind, id), std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> DocumentStore::ids(std::string_view kind) const {
  const std::string prefix = std::string(kind) + ".";
  std::vector<std::string> out;
  std::lock_guard lock(mu_);
  for (const auto& entry : fs::directory_iterator(dir_)) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= prefix.size() + 5 || name.rfind(prefix, 0) != 0) continue;
    if (name.substr(name.size() - 5) != ".json") continue;
    std::string id = name.substr(prefix.size(), name.size() - prefix.size() - 5);
    if (valid_id(id)) out.push_back(std::move(id));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace aevis
