#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "karma/synthgen.hpp"
#include "karma/trainer.hpp"

// JSON configuration documents mirroring the config structs. Unknown keys are
// rejected with their full dotted path; missing keys fall back to defaults.
// Overrides are "dotted.path=value" strings applied before validation.

namespace karma::config {

train::TrainConfig load_train_config(const std::filesystem::path& path,
                                     const std::vector<std::string>& overrides = {});
synth::GenParams load_gen_config(const std::filesystem::path& path,
                                 const std::vector<std::string>& overrides = {});

train::TrainConfig train_config_from_json_text(const std::string& text,
                                               const std::vector<std::string>& overrides = {});
synth::GenParams gen_config_from_json_text(const std::string& text,
                                           const std::vector<std::string>& overrides = {});

std::string to_json_text(const train::TrainConfig& cfg);
std::string to_json_text(const synth::GenParams& params);

}  // namespace karma::config
