// Copyright 2026 The biact-sim Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// INI configuration with flat sections [arm], [object], [scene], [control]
// and [model]. Every key is optional; missing keys keep the embedded default.
// Per-joint values are comma-separated lists with one entry per joint
// (dof arm joints followed by the gripper).

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "biact/biact_policy.hpp"
#include "biact/runtime.hpp"

namespace biact {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SimConfig {
  SceneSetup setup;
  PolicyConfig model;

  /// Checks each part and the couplings between them (joint count, frame size).
  void validate() const;
};

/// Embedded defaults: 2-DOF arm, softball at the pick point, default gains.
SimConfig default_config();

/// Parses INI text on top of the defaults. Unknown sections or keys, malformed
/// numbers and list-length mismatches raise ConfigError.
SimConfig parse_config(const std::string& ini_text);
SimConfig load_config(const std::filesystem::path& path);

/// INI text that parse_config maps back to the same configuration.
std::string format_config(const SimConfig& config);

}  // namespace biact
