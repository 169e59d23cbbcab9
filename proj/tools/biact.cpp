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

// biact: one entry point for the whole pipeline.
//
// Exit codes: 0 success, 1 usage or flag validation, 2 runtime failure,
// 3 invariant-suite failure (sim-check).

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <pthread.h>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "biact/biact_policy.hpp"
#include "biact/config.hpp"
#include "biact/episode_store.hpp"
#include "biact/runtime.hpp"
#include "biact/sim_check.hpp"
#include "biact/teleop_bridge.hpp"

namespace fs = std::filesystem;
using namespace biact;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitInvariants = 3;

/// Thrown for flag combinations that CLI11 cannot express; maps to exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// PolicyConfig flags; unset ones keep the config-file value.
struct ModelFlags {
  std::optional<int> chunk, d_model, heads, encoder_layers, decoder_layers, cvae_layers, ffn,
      patch, latent, batch;
  std::optional<double> kl_weight, lr, dropout;
  bool no_force = false;

  void add_to(CLI::App* app) {
    app->add_option("--chunk", chunk, "Chunk length k in 100 Hz ticks");
    app->add_option("--d-model", d_model, "Transformer width");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--enc-layers", encoder_layers, "Encoder layers");
    app->add_option("--dec-layers", decoder_layers, "Decoder layers");
    app->add_option("--cvae-layers", cvae_layers, "CVAE encoder layers");
    app->add_option("--ffn", ffn, "Feed-forward width");
    app->add_option("--patch", patch, "Image patch size in pixels");
    app->add_option("--latent", latent, "Latent dimension");
    app->add_option("--batch", batch, "Batch size");
    app->add_option("--kl-weight", kl_weight, "KL weight beta");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--dropout", dropout, "Dropout probability");
    app->add_flag("--no-force", no_force, "Train the w/o-force variant");
  }

  PolicyConfig apply(PolicyConfig c) const {
    if (chunk) c.chunk_k = *chunk;
    if (d_model) c.d_model = *d_model;
    if (heads) c.heads = *heads;
    if (encoder_layers) c.encoder_layers = *encoder_layers;
    if (decoder_layers) c.decoder_layers = *decoder_layers;
    if (cvae_layers) c.cvae_layers = *cvae_layers;
    if (ffn) c.ffn_dim = *ffn;
    if (patch) c.patch_size = *patch;
    if (latent) c.latent_dim = *latent;
    if (batch) c.batch_size = *batch;
    if (kl_weight) c.kl_weight = *kl_weight;
    if (lr) c.lr = *lr;
    if (dropout) c.dropout = *dropout;
    if (no_force) c.use_force = false;
    try {
      c.validate();
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "INI config file (flags win over it)")
      ->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed for every random stream");
  app->add_option("--jobs", c.jobs, "Parallel episodes")->check(CLI::PositiveNumber);
}

SimConfig load(const Common& c) {
  try {
    return c.config_path.empty() ? default_config() : load_config(c.config_path);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::vector<ObjectSpec> parse_objects(const std::vector<std::string>& specs) {
  std::vector<ObjectSpec> out;
  for (const auto& s : specs) {
    try {
      out.push_back(parse_object_spec(s));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

/// Positions every object at the configured pick point.
std::vector<ObjectSpec> place_objects(std::vector<ObjectSpec> objects, const SceneSetup& setup) {
  for (auto& o : objects) o.initial_position = setup.object.initial_position;
  return objects;
}

void require_dir(const fs::path& p, const char* flag) {
  if (!fs::is_directory(p)) throw UsageError(std::string(flag) + ": no such directory " + p.string());
}

Dataset load_dataset(const fs::path& dir) {
  std::vector<Episode> episodes;
  for (const auto& p : list_episodes(dir)) episodes.push_back(load_episode(p));
  if (episodes.empty()) throw std::runtime_error("no episodes under " + dir.string());
  return Dataset(std::move(episodes));
}

int run_serve(const SceneSetup& setup, const TeleopOptions& topts, const ServerOptions& sopts,
              int stop_after_episodes) {
  // Block termination signals in every thread so the main thread can wait for them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  TeleopServer server(setup, topts, sopts);
  const int port = server.start();
  std::cerr << "teleop bridge listening on ws://" << sopts.address << ":" << port << "\n";
  if (stop_after_episodes <= 0) {
    int sig = 0;
    sigwait(&set, &sig);
  } else {
    // collect --expert teleop: finish once enough episodes are on disk.
    timespec poll{0, 200'000'000};
    for (;;) {
      if (static_cast<int>(list_episodes(topts.out_dir).size()) >= stop_after_episodes) break;
      if (sigtimedwait(&set, nullptr, &poll) > 0) break;
    }
  }
  server.stop();
  const ServerStats st = server.stats();
  std::cerr << "stopped after " << st.sim_steps << " sim steps, " << st.frames_dropped
            << " state frames dropped\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"biact: bilateral-control demonstrations and chunked-action policies"};
  app.require_subcommand(1);

  // sim-check
  Common sc_common;
  bool print_config = false;
  std::string trace_csv;
  auto* sim_check = app.add_subcommand("sim-check", "Run the bilateral/DOB/RFOB invariant suite");
  add_common(sim_check, sc_common);
  sim_check->add_flag("--print-config", print_config, "Print the effective config and exit");
  sim_check->add_option("--trace", trace_csv, "Write a position-tracking trace CSV");

  // collect
  Common co_common;
  int episodes = 2;
  std::string expert = "scripted";
  std::vector<std::string> objects{"foam_ball", "softball"};
  std::string collect_out;
  double collect_jitter = 0.005;
  int port = 8765;
  auto* collect_cmd = app.add_subcommand("collect", "Record demonstrations");
  add_common(collect_cmd, co_common);
  collect_cmd->add_option("--episodes", episodes, "Episodes to record")
      ->check(CLI::PositiveNumber);
  collect_cmd->add_option("--expert", expert, "scripted or teleop")
      ->check(CLI::IsMember({"scripted", "teleop"}));
  collect_cmd->add_option("--objects", objects, "Object specs, round robin")->delimiter(',');
  collect_cmd->add_option("--out", collect_out, "Output directory")->required();
  collect_cmd->add_option("--object-jitter", collect_jitter, "Initial object jitter [m]")
      ->check(CLI::NonNegativeNumber);
  collect_cmd->add_option("--port", port, "WebSocket port for --expert teleop")
      ->check(CLI::Range(0, 65535));

  // train
  Common tr_common;
  ModelFlags tr_model;
  std::string train_data, train_out;
  int train_steps = 1000;
  auto* train = app.add_subcommand("train", "Train a policy; writes CKPT and CKPT.metrics.csv");
  add_common(train, tr_common);
  tr_model.add_to(train);
  train->add_option("--data", train_data, "Episode directory")->required();
  train->add_option("--steps", train_steps, "Optimizer steps")->check(CLI::PositiveNumber);
  train->add_option("--out", train_out, "Checkpoint path")->required();

  // eval
  Common ev_common;
  std::string eval_ckpt, eval_out, eval_mode = "chunk_serial";
  int eval_trials = 10;
  std::vector<std::string> eval_objects;
  double eval_decay = 0.1, eval_jitter = 0.005;
  auto* eval = app.add_subcommand("eval", "Run seeded autonomous trials; writes report.json");
  add_common(eval, ev_common);
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--trials", eval_trials, "Trials per object")->check(CLI::PositiveNumber);
  eval->add_option("--object", eval_objects, "Object spec (repeatable)")->required();
  eval->add_option("--mode", eval_mode, "chunk_serial or ensemble")
      ->check(CLI::IsMember({"chunk_serial", "serial", "ensemble", "temporal_ensemble"}));
  eval->add_option("--decay", eval_decay, "Temporal-ensemble decay m")
      ->check(CLI::PositiveNumber);
  eval->add_option("--object-jitter", eval_jitter, "Initial object jitter [m]")
      ->check(CLI::NonNegativeNumber);
  eval->add_option("--out", eval_out, "Output directory (report.json, trajectory CSVs)")
      ->required();

  // ablate
  Common ab_common;
  ModelFlags ab_model;
  std::string ablate_data, ablate_out;
  int ablate_steps = 3000, ablate_trials = 20;
  std::vector<std::string> ablate_objects{"glue_jar"};
  auto* ablate = app.add_subcommand("ablate", "Paired full vs w/o-force experiment");
  add_common(ablate, ab_common);
  ab_model.add_to(ablate);
  ablate->add_option("--data", ablate_data, "Episode directory")->required();
  ablate->add_option("--out", ablate_out, "Output directory")->required();
  ablate->add_option("--steps", ablate_steps, "Optimizer steps per variant")
      ->check(CLI::PositiveNumber);
  ablate->add_option("--trials", ablate_trials, "Trials per object and variant")
      ->check(CLI::PositiveNumber);
  ablate->add_option("--objects", ablate_objects, "Held-out object specs")->delimiter(',');

  // serve
  Common se_common;
  int serve_port = 8765;
  std::string ui_dir, serve_out, serve_address = "127.0.0.1";
  auto* serve = app.add_subcommand("serve", "Teleop WebSocket bridge (Ctrl-C to stop)");
  add_common(serve, se_common);
  serve->add_option("--port", serve_port, "WebSocket port")->check(CLI::Range(0, 65535));
  serve->add_option("--address", serve_address, "Listen address");
  serve->add_option("--ui-dir", ui_dir, "Static UI bundle served over HTTP")
      ->check(CLI::ExistingDirectory);
  serve->add_option("--out", serve_out, "Directory for recorded episodes");

  // export
  std::string export_episode, export_csv;
  auto* export_cmd = app.add_subcommand("export", "Write an episode's series as CSV");
  export_cmd->add_option("--episode", export_episode, "Episode directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  export_cmd->add_option("--csv", export_csv, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (sim_check->parsed()) {
      const SimConfig cfg = load(sc_common);
      if (print_config) {
        std::cout << format_config(cfg);
        return kExitOk;
      }
      ScenarioSetup s{cfg.setup.arm, cfg.setup.gains, cfg.setup.scene};
      const auto results = run_invariant_suite(s);
      print_results(std::cout, results);
      if (!trace_csv.empty()) {
        std::vector<TraceRow> rows;
        check_position_tracking(s, 5.0, &rows);
        std::ofstream out(trace_csv);
        if (!out) throw std::runtime_error("cannot write " + trace_csv);
        write_trace_csv(out, rows);
      }
      for (const auto& r : results) {
        if (!r.passed) return kExitInvariants;
      }
      return kExitOk;
    }

    if (collect_cmd->parsed()) {
      const SimConfig cfg = load(co_common);
      const auto objs = place_objects(parse_objects(objects), cfg.setup);
      if (objs.empty()) throw UsageError("--objects: at least one object is required");
      if (expert == "teleop") {
        TeleopOptions topts;
        topts.out_dir = collect_out;
        ServerOptions sopts;
        sopts.port = port;
        fs::create_directories(collect_out);
        SceneSetup setup = cfg.setup;
        setup.object = objs.front();
        return run_serve(setup, topts, sopts, episodes);
      }
      CollectOptions opts;
      opts.episodes = episodes;
      opts.objects = objs;
      opts.out_dir = collect_out;
      opts.seed = co_common.seed;
      opts.object_jitter = collect_jitter;
      opts.log = &std::cerr;
      const CollectReport rep = collect(cfg.setup, opts);
      std::cout << "saved " << rep.saved.size() << " episodes (" << rep.total_ticks
                << " ticks), discarded " << rep.discarded.size() << " attempts\n";
      return kExitOk;
    }

    if (train->parsed()) {
      const SimConfig cfg = load(tr_common);
      PolicyConfig model = tr_model.apply(cfg.model);
      require_dir(train_data, "--data");
      const fs::path out = train_out;
      if (!out.parent_path().empty()) require_dir(out.parent_path(), "--out");
      const Dataset data = load_dataset(train_data);
      model.joints = static_cast<int>(data.width() / 3);
      BiActPolicy policy(model, data.stats(), tr_common.seed);
      std::ofstream metrics(out.string() + ".metrics.csv");
      if (!metrics) throw std::runtime_error("cannot write " + out.string() + ".metrics.csv");
      metrics << "step,loss_total,loss_l1,loss_kl,wall_ms\n";
      metrics.precision(9);
      TrainOptions topts;
      topts.steps = train_steps;
      topts.seed = tr_common.seed;
      topts.on_step = [&](int step, const TrainMetrics& m, double ms) {
        metrics << step << ',' << m.loss_total << ',' << m.loss_l1 << ',' << m.loss_kl << ','
                << ms << '\n';
        if (step % 100 == 0 || step + 1 == train_steps) {
          std::cerr << "step " << step << " loss " << m.loss_total << " l1 " << m.loss_l1
                    << " kl " << m.loss_kl << "\n";
        }
      };
      train_policy(policy, data, topts);
      policy.save(out);
      std::cout << "wrote " << out.string() << " (" << policy.parameter_count()
                << " parameters)\n";
      return kExitOk;
    }

    if (eval->parsed()) {
      const SimConfig cfg = load(ev_common);
      const auto objs = place_objects(parse_objects(eval_objects), cfg.setup);
      EvalOptions opts;
      opts.trials = eval_trials;
      opts.seed = ev_common.seed;
      opts.jobs = ev_common.jobs;
      opts.object_jitter = eval_jitter;
      opts.schedule.mode = chunk_mode_from_string(eval_mode);
      opts.schedule.ensemble_decay = eval_decay;
      const BiActPolicy policy = BiActPolicy::load(eval_ckpt);
      opts.schedule.k = policy.config().chunk_k;
      fs::create_directories(eval_out);
      opts.trajectory_dir = fs::path(eval_out);
      const EvalReport rep = evaluate_policy(policy, cfg.setup, objs, opts);
      std::ofstream(fs::path(eval_out) / "report.json") << rep.to_json().dump(2) << "\n";
      for (const auto& s : rep.summary()) {
        std::cout << s.object << ": " << s.successes << "/" << s.trials << " (pick " << s.picked
                  << ", move " << s.moved << ", place " << s.placed << ")\n";
      }
      return kExitOk;
    }

    if (ablate->parsed()) {
      const SimConfig cfg = load(ab_common);
      AblationConfig ac;
      ac.model = ab_model.apply(cfg.model);
      ac.train_steps = ablate_steps;
      ac.seed = ab_common.seed;
      ac.eval_objects = place_objects(parse_objects(ablate_objects), cfg.setup);
      ac.eval.trials = ablate_trials;
      ac.eval.seed = ab_common.seed;
      ac.eval.jobs = ab_common.jobs;
      ac.eval.schedule.k = ac.model.chunk_k;
      ac.log = &std::cerr;
      require_dir(ablate_data, "--data");
      const Dataset data = load_dataset(ablate_data);
      ac.model.joints = static_cast<int>(data.width() / 3);
      const AblationReport rep = ablation_run(data, cfg.setup, ac);
      fs::create_directories(ablate_out);
      std::ofstream(fs::path(ablate_out) / "ablation.json") << rep.to_json().dump(2) << "\n";
      std::ostringstream table;
      print_ablation_table(table, rep);
      std::ofstream(fs::path(ablate_out) / "table.txt") << table.str();
      std::cout << table.str();
      return kExitOk;
    }

    if (serve->parsed()) {
      const SimConfig cfg = load(se_common);
      TeleopOptions topts;
      if (!serve_out.empty()) {
        fs::create_directories(serve_out);
        topts.out_dir = serve_out;
      }
      ServerOptions sopts;
      sopts.port = serve_port;
      sopts.address = serve_address;
      sopts.ui_dir = ui_dir;
      return run_serve(cfg.setup, topts, sopts, 0);
    }

    if (export_cmd->parsed()) {
      const Episode ep = load_episode(export_episode);
      std::ofstream out(export_csv);
      if (!out) throw std::runtime_error("cannot write " + export_csv);
      const std::size_t n = static_cast<std::size_t>(ep.meta.dof_plus_gripper);
      out << "tick,t";
      for (const char* side : {"follower", "leader"}) {
        for (const char* ch : {"theta", "omega", "tau"}) {
          for (std::size_t i = 0; i < n; ++i) out << ',' << side << '_' << ch << i;
        }
      }
      out << '\n';
      out.precision(9);
      for (std::size_t t = 0; t < ep.ticks(); ++t) {
        out << t << ',' << static_cast<double>(t) / ep.meta.sample_rate;
        for (float v : ep.follower_row(t)) out << ',' << v;
        for (float v : ep.leader_row(t)) out << ',' << v;
        out << '\n';
      }
      std::cout << "wrote " << ep.ticks() << " rows to " << export_csv << "\n";
      return kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
