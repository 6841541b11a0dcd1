#pragma once

#include <string>

#include "json.hpp"
#include "simpleq/common.hpp"
#include "simpleq/mlp.hpp"

namespace simpleq {

using Json = nlohmann::json;

// nlohmann emits shortest round-tripping decimals, so saving and reloading a
// checkpoint reproduces every parameter bit-exactly.

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);
Json vector_to_json(const Vector& v);
Vector vector_from_json(const Json& j);

Json params_to_json(const MlpParams& params);
MlpParams params_from_json(const Json& j);

Json adam_to_json(const AdamState& state);
AdamState adam_from_json(const Json& j, const MlpParams& params);

void write_json_file(const std::string& path, const Json& j);
Json read_json_file(const std::string& path);

}  // namespace simpleq
