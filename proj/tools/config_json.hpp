#pragma once

#include <filesystem>

#include <json.hpp>

#include "defreg/register.hpp"
#include "defreg/synth.hpp"

namespace defreg::cli {

nlohmann::json to_json(const RegistrationConfig& cfg);
nlohmann::json to_json(const LossConfig& cfg);
nlohmann::json to_json(const ConvNetConfig& cfg);

// Overwrites the fields present in `j`; unknown keys are rejected.
void apply_json(const nlohmann::json& j, RegistrationConfig& cfg);
void apply_json(const nlohmann::json& j, SynthConfig& cfg);

// Reads a config file. A run manifest is accepted too: its "config" object is used.
nlohmann::json read_config_file(const std::filesystem::path& path);

} // namespace defreg::cli
