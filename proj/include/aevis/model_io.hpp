#pragma once

#include <string>

#include "aevis/model.hpp"

namespace aevis {

/// Current model document version. Loaders reject any other value.
inline constexpr int kModelFormatVersion = 1;

/// Parses a model document (see docs/formats.md). Throws ParseError with the
/// path of the offending field, or ValidationError naming the first layer
/// whose shapes do not chain.
ModelSpec load_model(const std::string& bytes);

std::string save_model(const ModelSpec& model);

ModelSpec load_model_file(const std::string& path);
void save_model_file(const ModelSpec& model, const std::string& path);

}  // namespace aevis
