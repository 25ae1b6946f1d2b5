#pragma once

#include <json.hpp>

#include "aevis/datapath.hpp"
#include "aevis/detail/json_reader.hpp"

namespace aevis::detail {

nlohmann::json params_doc(const ExtractionParams& p);
ExtractionParams read_params(const JsonReader& r);

}  // namespace aevis::detail
