#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "npad/autodiff.hpp"

namespace npad {

/// Parameter checkpoint layout:
///   one line of compact JSON (format tag, dtype "f64le", tensor names and
///   shapes in payload order, free-form metadata), a '\n', then every tensor's
///   values as raw little-endian IEEE-754 doubles, concatenated in header order.
struct Checkpoint {
    ParameterSet params;
    nlohmann::json metadata = nlohmann::json::object();
};

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace npad
