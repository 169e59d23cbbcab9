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

#include "biact/episode_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>

#include "json.hpp"

namespace biact {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_name(const char* prefix, std::size_t t) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06zu.pgm", prefix, t);
  return buf;
}

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

void put_f32(std::string& out, float f) {
  const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(f));
  char b[4];
  std::memcpy(b, &le, 4);
  out.append(b, 4);
}

float get_f32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return std::bit_cast<float>(to_le(v));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StoreError("cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw StoreError("write failed: " + path.string());
}

json stats_to_json(const ChannelStats& s) { return json{{"mean", s.mean}, {"std", s.std}}; }

ChannelStats stats_from_json(const json& j) {
  ChannelStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  return s;
}

json meta_to_json(const EpisodeMeta& m) {
  const ObjectSpec& o = m.object_spec;
  return json{
      {"format_version", m.format_version},
      {"dof_plus_gripper", m.dof_plus_gripper},
      {"control_rate", m.control_rate},
      {"sample_rate", m.sample_rate},
      {"chunk_capable_length", m.chunk_capable_length},
      {"task", to_string(m.task)},
      {"object_spec",
       {{"name", o.name},
        {"mass", o.mass},
        {"contact_stiffness", o.contact_stiffness},
        {"radius", o.radius},
        {"crush_force", o.crush_force},
        {"initial_position", {o.initial_position.x, o.initial_position.y}}}},
      {"normalization_stats",
       {{"follower", stats_to_json(m.normalization.follower)},
        {"leader", stats_to_json(m.normalization.leader)}}},
      {"source", m.source},
      {"seed", m.seed},
      {"success", m.success},
  };
}

EpisodeMeta meta_from_json(const json& j) {
  EpisodeMeta m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != kEpisodeFormatVersion) {
    throw StoreError("meta.json: unsupported format_version " + std::to_string(m.format_version) +
                     " (expected " + std::to_string(kEpisodeFormatVersion) + ")");
  }
  m.dof_plus_gripper = j.at("dof_plus_gripper").get<int>();
  m.control_rate = j.at("control_rate").get<double>();
  m.sample_rate = j.at("sample_rate").get<double>();
  m.chunk_capable_length = j.at("chunk_capable_length").get<std::int64_t>();
  m.task = task_from_string(j.at("task").get<std::string>());
  const json& o = j.at("object_spec");
  m.object_spec.name = o.at("name").get<std::string>();
  m.object_spec.mass = o.at("mass").get<double>();
  m.object_spec.contact_stiffness = o.at("contact_stiffness").get<double>();
  m.object_spec.radius = o.at("radius").get<double>();
  m.object_spec.crush_force = o.at("crush_force").get<double>();
  const auto p = o.at("initial_position").get<std::vector<double>>();
  if (p.size() != 2) throw StoreError("meta.json: initial_position must have 2 entries");
  m.object_spec.initial_position = {p[0], p[1]};
  m.normalization.follower = stats_from_json(j.at("normalization_stats").at("follower"));
  m.normalization.leader = stats_from_json(j.at("normalization_stats").at("leader"));
  m.source = j.value("source", std::string("unknown"));
  m.seed = j.value("seed", std::uint64_t{0});
  m.success = j.value("success", false);
  return m;
}

void check_stats(const ChannelStats& s, std::size_t width, const char* which) {
  if (s.mean.size() != width || s.std.size() != width) {
    throw StoreError(std::string("normalization_stats.") + which + ": expected " +
                     std::to_string(width) + " channels");
  }
  for (std::size_t i = 0; i < width; ++i) {
    if (!std::isfinite(s.mean[i]) || !std::isfinite(s.std[i]) || !(s.std[i] > 0.0)) {
      throw StoreError(std::string("normalization_stats.") + which + ": channel " +
                       std::to_string(i) + " not finite or std <= 0");
    }
  }
}

}  // namespace

std::string to_string(TaskKind task) {
  return task == TaskKind::pick_place ? "pick_place" : "put_in_drawer";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "pick_place") return TaskKind::pick_place;
  if (s == "put_in_drawer") return TaskKind::put_in_drawer;
  throw StoreError("unknown task '" + s + "'");
}

ChannelStats compute_stats(std::span<const float> series, std::size_t width) {
  if (width == 0 || series.size() % width != 0) {
    throw DimensionError("compute_stats: series length not a multiple of width");
  }
  const std::size_t rows = series.size() / width;
  ChannelStats s;
  s.mean.assign(width, 0.0);
  s.std.assign(width, kStdFloor);
  if (rows == 0) return s;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) s.mean[c] += series[r * width + c];
  }
  for (double& m : s.mean) m /= static_cast<double>(rows);
  std::vector<double> var(width, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double d = series[r * width + c] - s.mean[c];
      var[c] += d * d;
    }
  }
  for (std::size_t c = 0; c < width; ++c) {
    s.std[c] = std::max(kStdFloor, std::sqrt(var[c] / static_cast<double>(rows)));
  }
  return s;
}

bool EpisodeMeta::operator==(const EpisodeMeta& o) const {
  const ObjectSpec &a = object_spec, &b = o.object_spec;
  return format_version == o.format_version && dof_plus_gripper == o.dof_plus_gripper &&
         control_rate == o.control_rate && sample_rate == o.sample_rate &&
         chunk_capable_length == o.chunk_capable_length && task == o.task &&
         normalization == o.normalization && source == o.source && seed == o.seed &&
         success == o.success && a.name == b.name && a.mass == b.mass &&
         a.contact_stiffness == b.contact_stiffness && a.radius == b.radius &&
         a.crush_force == b.crush_force && a.initial_position.x == b.initial_position.x &&
         a.initial_position.y == b.initial_position.y;
}

std::span<const float> Episode::follower_row(std::size_t t) const {
  return std::span<const float>(follower_series).subspan(t * width(), width());
}

std::span<const float> Episode::leader_row(std::size_t t) const {
  return std::span<const float>(leader_series).subspan(t * width(), width());
}

void Episode::finalize() {
  meta.chunk_capable_length = static_cast<std::int64_t>(ticks());
  meta.normalization.follower = compute_stats(follower_series, width());
  meta.normalization.leader = compute_stats(leader_series, width());
  for (std::size_t t = 0; t < overhead_frames.size(); ++t) {
    overhead_frames[t].timestamp = static_cast<double>(t) / meta.sample_rate;
  }
  for (std::size_t t = 0; t < gripper_frames.size(); ++t) {
    gripper_frames[t].timestamp = static_cast<double>(t) / meta.sample_rate;
  }
}

void Episode::validate() const {
  if (meta.format_version != kEpisodeFormatVersion) {
    throw StoreError("unsupported format_version " + std::to_string(meta.format_version));
  }
  if (meta.dof_plus_gripper < 2) throw StoreError("dof_plus_gripper must be >= 2");
  if (!(meta.control_rate > 0.0) || !(meta.sample_rate > 0.0)) {
    throw StoreError("rates must be positive");
  }
  const std::size_t w = width();
  if (follower_series.size() % w != 0 || leader_series.size() % w != 0) {
    throw StoreError("series length not a multiple of " + std::to_string(w));
  }
  const std::size_t n = ticks();
  if (n == 0) throw StoreError("episode has no ticks");
  if (leader_series.size() != follower_series.size() || overhead_frames.size() != n ||
      gripper_frames.size() != n) {
    throw StoreError("inconsistent lengths: follower " + std::to_string(n) + ", leader " +
                     std::to_string(leader_series.size() / w) + ", overhead " +
                     std::to_string(overhead_frames.size()) + ", gripper " +
                     std::to_string(gripper_frames.size()));
  }
  if (meta.chunk_capable_length != static_cast<std::int64_t>(n)) {
    throw StoreError("chunk_capable_length " + std::to_string(meta.chunk_capable_length) +
                     " != " + std::to_string(n) + " ticks");
  }
  for (std::size_t i = 0; i < follower_series.size(); ++i) {
    if (!std::isfinite(follower_series[i]) || !std::isfinite(leader_series[i])) {
      throw StoreError("non-finite joint value at tick " + std::to_string(i / w));
    }
  }
  check_stats(meta.normalization.follower, w, "follower");
  check_stats(meta.normalization.leader, w, "leader");
  for (const auto* frames : {&overhead_frames, &gripper_frames}) {
    for (const Frame& f : *frames) {
      if (f.channels != 1 || f.width <= 0 || f.height <= 0 ||
          f.pixels.size() != static_cast<std::size_t>(f.width) * static_cast<std::size_t>(f.height)) {
        throw StoreError("malformed frame");
      }
    }
  }
}

void write_pgm(const Frame& frame, const fs::path& path) {
  if (frame.channels != 1) throw StoreError("write_pgm: only grayscale frames are supported");
  std::string bytes = "P5\n" + std::to_string(frame.width) + " " + std::to_string(frame.height) +
                      "\n255\n";
  bytes.append(reinterpret_cast<const char*>(frame.pixels.data()), frame.pixels.size());
  write_file(path, bytes);
}

Frame read_pgm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P5") throw StoreError(path.string() + ": not a binary PGM");
  Frame f;
  try {
    f.width = std::stoi(token());
    f.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw StoreError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw StoreError(path.string() + ": bad PGM header");
  }
  ++pos;  // single whitespace byte after maxval
  const std::size_t expected = static_cast<std::size_t>(f.width) * static_cast<std::size_t>(f.height);
  if (f.width <= 0 || f.height <= 0 || bytes.size() < pos || bytes.size() - pos != expected) {
    throw StoreError(path.string() + ": expected " + std::to_string(expected) + " pixel bytes");
  }
  f.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return f;
}

void save_episode(const Episode& episode, const fs::path& dir) {
  episode.validate();
  const fs::path target = fs::absolute(dir);
  fs::create_directories(target.parent_path());
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp / "frames");

  write_file(tmp / "meta.json", meta_to_json(episode.meta).dump(2) + "\n");

  std::string joints;
  joints.reserve(episode.follower_series.size() * 8);
  for (std::size_t t = 0; t < episode.ticks(); ++t) {
    for (float v : episode.follower_row(t)) put_f32(joints, v);
    for (float v : episode.leader_row(t)) put_f32(joints, v);
  }
  write_file(tmp / "joints.bin", joints);

  for (std::size_t t = 0; t < episode.ticks(); ++t) {
    write_pgm(episode.overhead_frames[t], tmp / "frames" / frame_name("overhead", t));
    write_pgm(episode.gripper_frames[t], tmp / "frames" / frame_name("gripper", t));
  }

  // A directory cannot be renamed over a non-empty one, so move the old copy
  // aside first.
  if (fs::exists(target)) {
    const fs::path old = target.parent_path() / (target.filename().string() + ".old");
    fs::remove_all(old, ec);
    fs::rename(target, old);
    fs::rename(tmp, target);
    fs::remove_all(old, ec);
  } else {
    fs::rename(tmp, target);
  }
}

Episode load_episode(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw StoreError("no episode directory at " + dir.string());
  Episode ep;
  try {
    ep.meta = meta_from_json(json::parse(read_file(dir / "meta.json")));
  } catch (const json::exception& e) {
    throw StoreError((dir / "meta.json").string() + ": " + e.what());
  }
  if (ep.meta.dof_plus_gripper < 2) throw StoreError("meta.json: dof_plus_gripper must be >= 2");
  if (ep.meta.chunk_capable_length < 0) throw StoreError("meta.json: negative length");
  const std::size_t w = ep.width();
  const auto n = static_cast<std::size_t>(ep.meta.chunk_capable_length);

  const fs::path joints_path = dir / "joints.bin";
  const std::string joints = read_file(joints_path);
  const std::size_t expected = n * 2 * w * 4;
  if (joints.size() != expected) {
    throw StoreError(joints_path.string() + ": size " + std::to_string(joints.size()) +
                     " bytes, expected " + std::to_string(expected));
  }
  ep.follower_series.resize(n * w);
  ep.leader_series.resize(n * w);
  const char* p = joints.data();
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < w; ++c, p += 4) ep.follower_series[t * w + c] = get_f32(p);
    for (std::size_t c = 0; c < w; ++c, p += 4) ep.leader_series[t * w + c] = get_f32(p);
  }

  const fs::path frames = dir / "frames";
  for (std::size_t t = 0;; ++t) {
    const fs::path over = frames / frame_name("overhead", t);
    const fs::path grip = frames / frame_name("gripper", t);
    const bool has_over = fs::exists(over), has_grip = fs::exists(grip);
    if (!has_over && !has_grip) break;
    if (has_over) ep.overhead_frames.push_back(read_pgm(over));
    if (has_grip) ep.gripper_frames.push_back(read_pgm(grip));
  }
  if (ep.overhead_frames.size() != n || ep.gripper_frames.size() != n) {
    throw StoreError(dir.string() + ": frame count (overhead " +
                     std::to_string(ep.overhead_frames.size()) + ", gripper " +
                     std::to_string(ep.gripper_frames.size()) + ") does not match " +
                     std::to_string(n) + " ticks");
  }
  for (std::size_t t = 0; t < n; ++t) {
    ep.overhead_frames[t].timestamp = static_cast<double>(t) / ep.meta.sample_rate;
    ep.gripper_frames[t].timestamp = static_cast<double>(t) / ep.meta.sample_rate;
  }
  ep.validate();
  return ep;
}

std::vector<fs::path> list_episodes(const fs::path& root) {
  if (!fs::is_directory(root)) throw StoreError("no such directory: " + root.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void export_joints_csv(const Episode& episode, std::ostream& os) {
  const int n = episode.meta.dof_plus_gripper;
  os << "tick,t";
  for (const char* role : {"follower", "leader"}) {
    for (const char* ch : {"theta", "omega", "tau"}) {
      for (int j = 0; j < n; ++j) os << ',' << role << '_' << ch << j;
    }
  }
  os << '\n' << std::setprecision(9);
  for (std::size_t t = 0; t < episode.ticks(); ++t) {
    os << t << ',' << static_cast<double>(t) / episode.meta.sample_rate;
    for (float v : episode.follower_row(t)) os << ',' << v;
    for (float v : episode.leader_row(t)) os << ',' << v;
    os << '\n';
  }
}

NormalizationStats pool_stats(std::span<const Episode> episodes) {
  if (episodes.empty()) throw StoreError("pool_stats: no episodes");
  const std::size_t w = episodes.front().width();
  auto pool = [&](auto pick) {
    std::vector<double> sum(w, 0.0), sq(w, 0.0);
    double total = 0.0;
    for (const Episode& ep : episodes) {
      if (ep.width() != w) throw DimensionError("pool_stats: episodes differ in joint count");
      const ChannelStats& s = pick(ep);
      const auto n = static_cast<double>(ep.ticks());
      for (std::size_t c = 0; c < w; ++c) {
        sum[c] += n * s.mean[c];
        sq[c] += n * (s.std[c] * s.std[c] + s.mean[c] * s.mean[c]);
      }
      total += n;
    }
    ChannelStats out;
    for (std::size_t c = 0; c < w; ++c) {
      const double m = sum[c] / total;
      out.mean.push_back(m);
      out.std.push_back(std::max(kStdFloor, std::sqrt(std::max(0.0, sq[c] / total - m * m))));
    }
    return out;
  };
  return {pool([](const Episode& e) -> const ChannelStats& { return e.meta.normalization.follower; }),
          pool([](const Episode& e) -> const ChannelStats& { return e.meta.normalization.leader; })};
}

std::vector<double> normalize(std::span<const float> row, const ChannelStats& s) {
  if (row.size() != s.mean.size()) throw DimensionError("normalize: width mismatch");
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = (row[i] - s.mean[i]) / s.std[i];
  return out;
}

std::vector<double> normalize(std::span<const double> row, const ChannelStats& s) {
  if (row.size() != s.mean.size()) throw DimensionError("normalize: width mismatch");
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = (row[i] - s.mean[i]) / s.std[i];
  return out;
}

std::vector<double> denormalize(std::span<const double> row, const ChannelStats& s) {
  if (row.size() != s.mean.size()) throw DimensionError("denormalize: width mismatch");
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] * s.std[i] + s.mean[i];
  return out;
}

Dataset::Dataset(std::vector<Episode> episodes) : episodes_(std::move(episodes)) {
  if (episodes_.empty()) throw StoreError("Dataset: no episodes");
  width_ = episodes_.front().width();
  offsets_.push_back(0);
  for (const Episode& ep : episodes_) {
    ep.validate();
    if (ep.width() != width_) throw DimensionError("Dataset: episodes differ in joint count");
    offsets_.push_back(offsets_.back() + ep.ticks());
  }
  stats_ = pool_stats(episodes_);
}

TrainingSample Dataset::make_sample(std::size_t episode, std::size_t tick, int k) const {
  const Episode& ep = episodes_.at(episode);
  const std::size_t n = ep.ticks();
  if (tick >= n) throw std::out_of_range("make_sample: tick past episode end");
  TrainingSample s;
  s.episode = episode;
  s.tick = tick;
  s.observation.timestamp = static_cast<double>(tick) / ep.meta.sample_rate;
  s.observation.follower_state = normalize(ep.follower_row(tick), stats_.follower);
  s.observation.overhead = ep.overhead_frames[tick];
  s.observation.gripper_view = ep.gripper_frames[tick];
  s.target.reserve(static_cast<std::size_t>(k) * width_);
  for (int i = 0; i < k; ++i) {
    const std::size_t src = tick + static_cast<std::size_t>(i);
    const bool pad = src >= n;
    const auto row = normalize(ep.leader_row(pad ? n - 1 : src), stats_.leader);
    s.target.insert(s.target.end(), row.begin(), row.end());
    s.pad_mask.push_back(pad);
  }
  return s;
}

Batch Dataset::sample_batch(int batch_size, int k, std::uint64_t seed) const {
  if (k < 1) throw std::invalid_argument("sample_batch: k must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("sample_batch: batch_size must be >= 1");
  const bool any_long_enough = std::any_of(episodes_.begin(), episodes_.end(), [&](const Episode& e) {
    return e.ticks() >= static_cast<std::size_t>(k);
  });
  if (!any_long_enough) {
    throw std::invalid_argument("sample_batch: k = " + std::to_string(k) +
                                " exceeds every episode length");
  }
  std::mt19937_64 rng(seed);
  // Hand-rolled rather than uniform_int_distribution so batches are identical
  // across standard library implementations.
  const std::uint64_t total = total_ticks();
  Batch b;
  b.chunk = k;
  b.width = width_;
  b.samples.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const std::uint64_t flat = rng() % total;
    const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), flat);
    const auto ep = static_cast<std::size_t>(it - offsets_.begin()) - 1;
    b.samples.push_back(make_sample(ep, flat - offsets_[ep], k));
  }
  return b;
}

}  // namespace biact
