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

#include "biact/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace biact {
namespace {

namespace pt = boost::property_tree;

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += fmt(v[i]);
  }
  return out;
}

std::string trimmed(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& where, const std::string& text) {
  const std::string t = trimmed(text);
  double v = 0.0;
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size() || !std::isfinite(v)) {
    throw ConfigError(where + ": expected a finite number, got '" + text + "'");
  }
  return v;
}

int to_int(const std::string& where, const std::string& text) {
  const std::string t = trimmed(text);
  int v = 0;
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) {
    throw ConfigError(where + ": expected an integer, got '" + text + "'");
  }
  return v;
}

bool to_bool(const std::string& where, const std::string& text) {
  const std::string t = trimmed(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError(where + ": expected true or false, got '" + text + "'");
}

std::vector<double> to_list(const std::string& where, const std::string& text, std::size_t n) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_double(where, item));
  if (out.size() != n) {
    throw ConfigError(where + ": expected " + std::to_string(n) + " comma-separated values, got " +
                      std::to_string(out.size()));
  }
  return out;
}

using Setter = std::function<void(const std::string& where, const std::string& value)>;

/// Applies the keys of one section through a fixed setter table.
void apply_section(const pt::ptree& tree, const std::string& section,
                   const std::map<std::string, Setter>& setters) {
  const auto node = tree.get_child_optional(section);
  if (!node) return;
  for (const auto& [key, child] : *node) {
    const std::string where = "[" + section + "] " + key;
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(where + ": unknown key");
    it->second(where, child.data());
  }
}

}  // namespace

void SimConfig::validate() const {
  setup.validate();
  model.validate();
  if (model.joints != setup.arm.joints()) {
    throw ConfigError("config: model joints " + std::to_string(model.joints) +
                      " do not match arm joints " + std::to_string(setup.arm.joints()));
  }
  if (model.frame_size != setup.render.width || model.frame_size != setup.render.height) {
    throw ConfigError("config: model frame size " + std::to_string(model.frame_size) +
                      " does not match rendered frames " + std::to_string(setup.render.width) +
                      "x" + std::to_string(setup.render.height));
  }
}

SimConfig default_config() {
  SimConfig c;
  c.setup.object = parse_object_spec("softball");
  c.setup.object.initial_position = c.setup.task.pick_position;
  c.model.joints = c.setup.arm.joints();
  c.model.frame_size = c.setup.render.width;
  return c;
}

SimConfig parse_config(const std::string& ini_text) {
  pt::ptree tree;
  try {
    std::istringstream in(ini_text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  static const std::set<std::string> sections{"arm", "object", "scene", "control", "model"};
  for (const auto& [name, child] : tree) {
    if (!sections.count(name)) throw ConfigError("config: unknown section [" + name + "]");
  }

  SimConfig c = default_config();
  SceneSetup& s = c.setup;

  // dof decides the defaults every other per-joint list is measured against.
  if (const auto dof = tree.get_optional<std::string>("arm.dof")) {
    s.arm = ArmConfig::defaults(to_int("[arm] dof", *dof));
  }
  const std::size_t n = static_cast<std::size_t>(s.arm.joints());
  auto list_into = [n](std::vector<double>& dst) {
    return [&dst, n](const std::string& w, const std::string& v) { dst = to_list(w, v, n); };
  };
  auto num_into = [](double& dst) {
    return [&dst](const std::string& w, const std::string& v) { dst = to_double(w, v); };
  };
  auto int_into = [](int& dst) {
    return [&dst](const std::string& w, const std::string& v) { dst = to_int(w, v); };
  };

  apply_section(tree, "arm",
                {{"dof", [](const std::string&, const std::string&) {}},
                 {"link_lengths",
                  [&](const std::string& w, const std::string& v) {
                    s.arm.link_lengths = to_list(w, v, n - 1);
                  }},
                 {"inertia", list_into(s.arm.inertia)},
                 {"viscous_friction", list_into(s.arm.viscous_friction)},
                 {"coulomb_friction", list_into(s.arm.coulomb_friction)},
                 {"gravity_torque_scale", list_into(s.arm.gravity_torque_scale)},
                 {"joint_limits", list_into(s.arm.joint_limits)},
                 {"torque_limits", list_into(s.arm.torque_limits)},
                 {"home_angles", list_into(s.arm.home_angles)}});

  // Nominal parameters follow the (possibly overridden) plant unless [control] says otherwise.
  s.gains = ControlGains::matching(s.arm);
  apply_section(tree, "control",
                {{"kp", num_into(s.gains.kp)},
                 {"kd", num_into(s.gains.kd)},
                 {"kf", num_into(s.gains.kf)},
                 {"g_dob", num_into(s.gains.g_dob)},
                 {"j_nominal", list_into(s.gains.j_nominal)},
                 {"d_nominal", list_into(s.gains.d_nominal)},
                 {"coulomb_nominal", list_into(s.gains.coulomb_nominal)},
                 {"gravity_nominal_scale", list_into(s.gains.gravity_nominal_scale)}});

  if (const auto name = tree.get_optional<std::string>("object.name")) {
    const Vec2 pos = s.object.initial_position;
    try {
      s.object = parse_object_spec(trimmed(*name));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[object] name: ") + e.what());
    }
    s.object.initial_position = pos;
  }
  apply_section(tree, "object",
                {{"name", [](const std::string&, const std::string&) {}},
                 {"mass", num_into(s.object.mass)},
                 {"contact_stiffness", num_into(s.object.contact_stiffness)},
                 {"radius", num_into(s.object.radius)},
                 {"crush_force", num_into(s.object.crush_force)},
                 {"x", num_into(s.object.initial_position.x)},
                 {"y", num_into(s.object.initial_position.y)}});
  s.task.pick_position = s.object.initial_position;

  int frame_size = s.render.width;
  apply_section(tree, "scene",
                {{"hold_coefficient", num_into(s.scene.hold_coefficient)},
                 {"gravity", num_into(s.scene.gravity)},
                 {"gripper_open_aperture", num_into(s.scene.gripper_open_aperture)},
                 {"gripper_aperture_per_rad", num_into(s.scene.gripper_aperture_per_rad)},
                 {"capture_radius", num_into(s.scene.capture_radius)},
                 {"dt", num_into(s.scene.dt)},
                 {"substeps", int_into(s.substeps)},
                 {"place_x", num_into(s.task.place_center.x)},
                 {"place_y", num_into(s.task.place_center.y)},
                 {"place_radius", num_into(s.task.place_radius)},
                 {"time_limit", num_into(s.task.time_limit)},
                 {"frame_size", int_into(frame_size)}});
  s.render.width = s.render.height = frame_size;
  s.render.place_center = s.task.place_center;
  s.render.place_radius = s.task.place_radius;

  PolicyConfig& m = c.model;
  apply_section(tree, "model",
                {{"d_model", int_into(m.d_model)},
                 {"heads", int_into(m.heads)},
                 {"encoder_layers", int_into(m.encoder_layers)},
                 {"decoder_layers", int_into(m.decoder_layers)},
                 {"cvae_layers", int_into(m.cvae_layers)},
                 {"ffn_dim", int_into(m.ffn_dim)},
                 {"patch_size", int_into(m.patch_size)},
                 {"latent_dim", int_into(m.latent_dim)},
                 {"chunk_k", int_into(m.chunk_k)},
                 {"kl_weight", num_into(m.kl_weight)},
                 {"lr", num_into(m.lr)},
                 {"batch_size", int_into(m.batch_size)},
                 {"dropout", num_into(m.dropout)},
                 {"use_force", [&m](const std::string& w, const std::string& v) {
                    m.use_force = to_bool(w, v);
                  }}});
  m.joints = s.arm.joints();
  m.frame_size = frame_size;

  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

SimConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const SimConfig& c) {
  const SceneSetup& s = c.setup;
  const PolicyConfig& m = c.model;
  std::ostringstream o;
  o << "[arm]\n"
    << "dof = " << s.arm.dof << "\n"
    << "link_lengths = " << fmt_list(s.arm.link_lengths) << "\n"
    << "inertia = " << fmt_list(s.arm.inertia) << "\n"
    << "viscous_friction = " << fmt_list(s.arm.viscous_friction) << "\n"
    << "coulomb_friction = " << fmt_list(s.arm.coulomb_friction) << "\n"
    << "gravity_torque_scale = " << fmt_list(s.arm.gravity_torque_scale) << "\n"
    << "joint_limits = " << fmt_list(s.arm.joint_limits) << "\n"
    << "torque_limits = " << fmt_list(s.arm.torque_limits) << "\n"
    << "home_angles = " << fmt_list(s.arm.home_angles) << "\n\n"
    << "[object]\n"
    << "name = " << s.object.name << "\n"
    << "mass = " << fmt(s.object.mass) << "\n"
    << "contact_stiffness = " << fmt(s.object.contact_stiffness) << "\n"
    << "radius = " << fmt(s.object.radius) << "\n"
    << "crush_force = " << fmt(s.object.crush_force) << "\n"
    << "x = " << fmt(s.object.initial_position.x) << "\n"
    << "y = " << fmt(s.object.initial_position.y) << "\n\n"
    << "[scene]\n"
    << "hold_coefficient = " << fmt(s.scene.hold_coefficient) << "\n"
    << "gravity = " << fmt(s.scene.gravity) << "\n"
    << "gripper_open_aperture = " << fmt(s.scene.gripper_open_aperture) << "\n"
    << "gripper_aperture_per_rad = " << fmt(s.scene.gripper_aperture_per_rad) << "\n"
    << "capture_radius = " << fmt(s.scene.capture_radius) << "\n"
    << "dt = " << fmt(s.scene.dt) << "\n"
    << "substeps = " << s.substeps << "\n"
    << "place_x = " << fmt(s.task.place_center.x) << "\n"
    << "place_y = " << fmt(s.task.place_center.y) << "\n"
    << "place_radius = " << fmt(s.task.place_radius) << "\n"
    << "time_limit = " << fmt(s.task.time_limit) << "\n"
    << "frame_size = " << s.render.width << "\n\n"
    << "[control]\n"
    << "kp = " << fmt(s.gains.kp) << "\n"
    << "kd = " << fmt(s.gains.kd) << "\n"
    << "kf = " << fmt(s.gains.kf) << "\n"
    << "g_dob = " << fmt(s.gains.g_dob) << "\n"
    << "j_nominal = " << fmt_list(s.gains.j_nominal) << "\n"
    << "d_nominal = " << fmt_list(s.gains.d_nominal) << "\n"
    << "coulomb_nominal = " << fmt_list(s.gains.coulomb_nominal) << "\n"
    << "gravity_nominal_scale = " << fmt_list(s.gains.gravity_nominal_scale) << "\n\n"
    << "[model]\n"
    << "d_model = " << m.d_model << "\n"
    << "heads = " << m.heads << "\n"
    << "encoder_layers = " << m.encoder_layers << "\n"
    << "decoder_layers = " << m.decoder_layers << "\n"
    << "cvae_layers = " << m.cvae_layers << "\n"
    << "ffn_dim = " << m.ffn_dim << "\n"
    << "patch_size = " << m.patch_size << "\n"
    << "latent_dim = " << m.latent_dim << "\n"
    << "chunk_k = " << m.chunk_k << "\n"
    << "kl_weight = " << fmt(m.kl_weight) << "\n"
    << "lr = " << fmt(m.lr) << "\n"
    << "batch_size = " << m.batch_size << "\n"
    << "dropout = " << fmt(m.dropout) << "\n"
    << "use_force = " << (m.use_force ? "true" : "false") << "\n";
  return o.str();
}

}  // namespace biact
