#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "aevis/error.hpp"

namespace aevis::detail {

/// Cursor over a parsed document that reports the JSON-pointer path of any
/// field it rejects.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& node, std::string path) : node_(&node), path_(std::move(path)) {}

  const nlohmann::json& node() const { return *node_; }
  const std::string& path() const { return path_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError((path_.empty() ? std::string("/") : path_) + ": " + what);
  }

  bool has(const std::string& key) const { return node_->is_object() && node_->contains(key); }

  JsonReader field(const std::string& key) const {
    if (!node_->is_object()) fail("expected an object");
    auto it = node_->find(key);
    if (it == node_->end()) JsonReader(*node_, path_ + "/" + key).fail("missing field");
    return JsonReader(*it, path_ + "/" + key);
  }

  JsonReader element(std::size_t i) const {
    return JsonReader((*node_)[i], path_ + "/" + std::to_string(i));
  }

  std::size_t array_size() const {
    if (!node_->is_array()) fail("expected an array");
    return node_->size();
  }

  double number() const {
    if (!node_->is_number()) fail("expected a number");
    const double v = node_->get<double>();
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }

  std::size_t index() const {
    if (!node_->is_number_integer() && !node_->is_number_unsigned()) fail("expected a non-negative integer");
    const auto v = node_->get<long long>();
    if (v < 0) fail("expected a non-negative integer");
    return static_cast<std::size_t>(v);
  }

  std::string string() const {
    if (!node_->is_string()) fail("expected a string");
    return node_->get<std::string>();
  }

  bool boolean() const {
    if (!node_->is_boolean()) fail("expected a boolean");
    return node_->get<bool>();
  }

  std::vector<double> numbers() const {
    std::vector<double> out(array_size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = element(i).number();
    return out;
  }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out(array_size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = element(i).index();
    return out;
  }

 private:
  const nlohmann::json* node_;
  std::string path_;
};

inline nlohmann::json parse_document(const std::string& bytes) {
  try {
    return nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("/: malformed document: ") + e.what());
  }
}

}  // namespace aevis::detail
