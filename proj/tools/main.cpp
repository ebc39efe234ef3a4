// pointlap command-line front end: training, evaluation, curvature analysis,
// mean-curvature-flow smoothing, and ablation grids over the synthetic tasks.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pointlap/checkpoint.hpp"
#include "pointlap/config.hpp"
#include "pointlap/data_io.hpp"
#include "pointlap/laplace.hpp"
#include "pointlap/networks.hpp"
#include "pointlap/threading.hpp"
#include "pointlap/training.hpp"
#include "pointlap/version.hpp"

namespace fs = std::filesystem;
using namespace pointlap;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string format;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_format = false) {
  cmd->add_option("--config", args.config_path, "configuration file (key = value lines)");
  cmd->add_option("--output-dir", args.output_dir, "directory for run artifacts");
  cmd->add_option("--seed", args.seed, "override the training seed");
  cmd->add_option("--overrides", args.overrides, "configuration overrides, key=value")
      ->delimiter(' ');
  if (with_format) {
    cmd->add_option("--format", args.format, "cloud file format: xyz | ply | csv");
  }
}

ExperimentConfig build_config(const CommonArgs& args) {
  ExperimentConfig cfg;
  if (!args.config_path.empty()) cfg = load_config(args.config_path);
  for (const auto& o : args.overrides) apply_override(cfg, o);
  if (args.seed) cfg.train.seed = *args.seed;
  return cfg;
}

// Creates the output directory and writes the run manifest. Refuses to reuse
// a directory that already holds a manifest, so runs are never clobbered.
void start_run(const std::string& output_dir, const ExperimentConfig& cfg,
               const std::string& command) {
  if (output_dir.empty()) throw ConfigError("this command requires --output-dir");
  fs::create_directories(output_dir);
  const fs::path manifest = fs::path(output_dir) / "manifest.txt";
  if (fs::exists(manifest)) {
    throw ConfigError("output directory already holds a run (found " + manifest.string() + ")");
  }
  std::ofstream m(manifest);
  if (!m) throw IoError("cannot write manifest: " + manifest.string());
  m << "version = " << kVersion << "\n";
  m << "command = " << command << "\n";
  m << "seed = " << cfg.train.seed << "\n";
  m << "# configuration snapshot\n" << serialize_config(cfg);
}

std::string metrics_table(const MetricReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "metric   value\n";
  out << "oa       " << r.oa << "\n";
  out << "ma       " << r.ma << "\n";
  out << "miou     " << r.miou << "\n";
  out << "imiou    " << r.imiou << "\n";
  out << "cmiou    " << r.cmiou << "\n";
  for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
    out << "iou[" << c << "]   " << r.per_class_iou[c] << "\n";
  }
  return out.str();
}

struct PreparedExperiment {
  ExperimentConfig cfg;
  SyntheticDataset data;
  Dataset train;
  Dataset test;
  std::vector<double> radii;
};

PreparedExperiment prepare(const ExperimentConfig& raw) {
  PreparedExperiment prep;
  prep.cfg = raw.resolved();
  prep.data = generate_synthetic(prep.cfg.data);
  prep.train = dataset_from_split(prep.data, prep.data.train);
  prep.test = dataset_from_split(prep.data, prep.data.test);
  const std::size_t sample_count = std::min<std::size_t>(4, prep.train.clouds.size());
  CloudBatch sample = make_batch(std::span(prep.train.clouds.data(), sample_count));
  prep.radii = estimate_stage_radii(prep.cfg.net, sample);
  return prep;
}

void write_epoch_log(const std::string& path, const std::vector<EpochRecord>& log) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write epoch log: " + path);
  f << "epoch\tlr\ttrain_loss\toa\tma\tmiou\timiou\tcmiou\n";
  for (const auto& rec : log) {
    f << rec.epoch << '\t' << rec.lr << '\t' << rec.train_loss << '\t' << rec.eval.oa << '\t'
      << rec.eval.ma << '\t' << rec.eval.miou << '\t' << rec.eval.imiou << '\t'
      << rec.eval.cmiou << '\n';
  }
}

void save_param_map(const std::map<std::string, Tensor>& params, const std::string& path) {
  ParamStore store;
  for (const auto& [name, t] : params) store.add(name, t);
  checkpoint::save(store, path);
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args) {
  PreparedExperiment prep = prepare(build_config(args));
  start_run(args.output_dir, prep.cfg, "train");

  Rng init_rng(prep.cfg.train.seed);
  ParamStore store;
  Network net(prep.cfg.net, store, init_rng, prep.radii);
  std::cout << "parameters: " << store.learnable_scalar_count() << " learnable\n";

  Trainer trainer(net, store, prep.train, prep.test, prep.cfg.train);
  TrainResult result = trainer.run([&](const EpochRecord& rec) {
    std::cout << "epoch " << rec.epoch << "  lr " << rec.lr << "  loss " << std::setprecision(5)
              << rec.train_loss << "  test_oa " << rec.eval.oa << "  test_miou " << rec.eval.miou
              << "\n";
  });

  const fs::path dir(args.output_dir);
  write_epoch_log((dir / "epochs.tsv").string(), result.log);
  checkpoint::save(store, (dir / "final.ckpt").string());
  save_param_map(result.best_params, (dir / "best.ckpt").string());

  std::ofstream metrics(dir / "metrics.txt");
  metrics << metrics_table(result.final_eval);
  std::cout << "final evaluation (voting_rounds = " << prep.cfg.train.voting_rounds << ")\n"
            << metrics_table(result.final_eval);
  std::cout << "best epoch " << result.best_epoch << " (" << result.best_metric << ")\n";
  std::cout << "artifacts written to " << args.output_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const CommonArgs& args, const std::string& checkpoint_path) {
  PreparedExperiment prep = prepare(build_config(args));
  Rng init_rng(prep.cfg.train.seed);
  ParamStore store;
  Network net(prep.cfg.net, store, init_rng, prep.radii);
  checkpoint::load_into(store, checkpoint_path);

  MetricReport report = evaluate(net, prep.test, prep.cfg.train.voting_rounds,
                                 prep.cfg.train.augment.without_rotation(), prep.cfg.train.seed,
                                 prep.cfg.train.batch_size);
  std::cout << metrics_table(report);
  if (!args.output_dir.empty()) {
    start_run(args.output_dir, prep.cfg, "eval");
    std::ofstream f(fs::path(args.output_dir) / "metrics.txt");
    f << metrics_table(report);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// flow
// ---------------------------------------------------------------------------

double radial_spread(const Tensor& positions) {
  const std::size_t n = positions.rows();
  double c[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) c[a] += positions.at(i, a);
  for (double& v : c) v /= static_cast<double>(n);
  std::vector<double> radii(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    radii[i] = std::hypot(positions.at(i, 0) - c[0], positions.at(i, 1) - c[1],
                          positions.at(i, 2) - c[2]);
    mean += radii[i];
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : radii) var += (r - mean) * (r - mean);
  return var / static_cast<double>(n);
}

int cmd_flow(const CommonArgs& args, const std::string& input, const std::string& output,
             double step, std::size_t iterations, std::size_t k) {
  const CloudFormat in_format =
      args.format.empty() ? cloud_format_from_path(input) : cloud_format_from_name(args.format);
  const CloudFormat out_format =
      args.format.empty() ? cloud_format_from_path(output) : cloud_format_from_name(args.format);
  PointCloud cloud = load_cloud(input, in_format);
  if (cloud.size() < k) {
    throw InsufficientPointsError("flow with k = " + std::to_string(k) + " needs at least " +
                                  std::to_string(k) + " points");
  }
  const double before = radial_spread(cloud.positions);
  NeighborIndex nbr = knn(cloud.positions, cloud.positions, k);
  Tensor smoothed = mean_curvature_flow(cloud.positions, nbr, step, iterations);
  const double after = radial_spread(smoothed);

  PointCloud out = cloud;
  out.positions = smoothed;
  SaveOptions options;
  std::ostringstream provenance;
  provenance << "step=" << step << " iterations=" << iterations << " k=" << k;
  options.comments = {provenance.str()};
  save_cloud(out, output, out_format, options);
  std::cout << "flow: " << iterations << " iterations at step " << step << " (k = " << k << ")\n";
  std::cout << "radial variance " << before << " -> " << after << "\n";
  std::cout << "wrote " << output << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// curvature
// ---------------------------------------------------------------------------

int cmd_curvature(const CommonArgs& args, const std::string& checkpoint_path,
                  const std::string& input, std::size_t stage) {
  ExperimentConfig cfg = build_config(args).resolved();
  if (stage >= kStageCount) {
    throw ConfigError("stage index " + std::to_string(stage) + " out of range [0, 5)");
  }
  if (cfg.net.stage_lu_count(stage) == 0) {
    throw ConfigError("stage " + std::to_string(stage) +
                      " has no laplacian unit to probe (lu_per_stage or lu_stages disables it)");
  }

  PointCloud cloud = normalize_unit_ball(load_cloud(input));
  if (cfg.net.num_categories > 0 && cloud.object_class.empty()) {
    cloud.object_class.assign(cfg.net.num_categories, 0.0);
    cloud.object_class[0] = 1.0;
  }

  // The radius estimate and the checkpoint's kernel geometry are both
  // overwritten by the load, so any same-shape estimate works here.
  CloudBatch batch = make_batch(std::span(&cloud, 1), cfg.net.num_categories);
  std::vector<double> radii = estimate_stage_radii(cfg.net, batch);
  Rng init_rng(cfg.train.seed);
  ParamStore store;
  Network net(cfg.net, store, init_rng, radii);
  checkpoint::load_into(store, checkpoint_path);

  LuProbeSink sink;
  auto stages = net.encode(batch, /*training=*/false, &sink);
  const std::string wanted = "encoder.stage" + std::to_string(stage) + ".lu0";
  const LuProbeRecord* record = sink.find(wanted);
  if (!record) throw ConfigError("no probe record for " + wanted);

  CurvatureReport report =
      curvature_probe(record->input, record->output, record->delta, record->neighbors);

  start_run(args.output_dir, cfg, "curvature");
  const fs::path dir(args.output_dir);

  std::ofstream table(dir / "curvature.tsv");
  if (!table) throw IoError("cannot write curvature table");
  table << "point\th_in\th_out\th_delta\n";
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < report.size(); ++i) {
    table << i << '\t' << fmt(report.h_in[i]) << '\t' << fmt(report.h_out[i]) << '\t'
          << fmt(report.h_delta[i]) << '\n';
  }

  PointCloud stage_cloud;
  stage_cloud.positions = stages[stage].positions;
  auto write_map = [&](const std::string& name, const std::vector<double>& field) {
    SaveOptions options;
    options.scalar_field = &field;
    options.comments = {"curvature map: " + name + " at encoder stage " + std::to_string(stage)};
    save_cloud(stage_cloud, (dir / (name + ".ply")).string(), CloudFormat::kAsciiPly, options);
  };
  write_map("h_in", report.h_in);
  write_map("h_out", report.h_out);
  write_map("h_delta", report.h_delta);

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.empty() ? 0.0 : v[v.size() / 2];
  };
  std::cout << "curvature probe at encoder stage " << stage << " (" << report.size()
            << " points)\n";
  std::cout << "median h_in " << median(report.h_in) << ", median h_out " << median(report.h_out)
            << ", median h_delta " << median(report.h_delta) << "\n";
  std::cout << "wrote curvature.tsv, h_in.ply, h_out.ply, h_delta.ply to " << args.output_dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct Variant {
  std::string name;
  std::vector<std::string> overrides;
};

std::vector<Variant> ablation_grid(const std::string& grid) {
  if (grid == "mt") {
    return {{"A", {"lu_use_m=true", "lu_use_t=true"}},
            {"B", {"lu_use_m=false", "lu_use_t=true"}},
            {"C", {"lu_use_m=true", "lu_use_t=false"}},
            {"D", {"lu_use_m=false", "lu_use_t=false"}}};
  }
  if (grid == "fusion") {
    return {{"A", {"lu_fusion=add"}},
            {"E", {"lu_fusion=concat"}},
            {"F", {"lu_fusion=mul"}},
            {"G", {"lu_fusion=none"}}};
  }
  if (grid == "k") {
    return {{"H", {"k_lu=8"}}, {"A", {"k_lu=16"}}, {"I", {"k_lu=24"}}, {"J", {"k_lu=32"}}};
  }
  if (grid == "baseline") {
    return {{"A", {}}, {"plain", {"lu_per_stage=0"}}};
  }
  // Custom grids: "name:key=v,key=v;name2:key=v"
  std::vector<Variant> variants;
  std::istringstream ss(grid);
  std::string part;
  while (std::getline(ss, part, ';')) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("grid variant must look like name:key=value[,key=value], got '" + part +
                        "'");
    }
    Variant v;
    v.name = io_detail::trim(part.substr(0, colon));
    for (const auto& assignment : config_detail::split_list(part.substr(colon + 1))) {
      if (!assignment.empty()) v.overrides.push_back(assignment);
    }
    variants.push_back(std::move(v));
  }
  if (variants.empty()) throw ConfigError("empty ablation grid");
  return variants;
}

int cmd_ablate(const CommonArgs& args, const std::string& grid) {
  ExperimentConfig base = build_config(args);
  start_run(args.output_dir, base, "ablate");
  std::vector<Variant> variants = ablation_grid(grid);

  std::ostringstream table;
  table << "variant\tuse_M\tuse_T\tfusion\tk\tmetric\n";
  std::cout << "variant  use_M  use_T  fusion  k   metric\n";
  for (const auto& variant : variants) {
    ExperimentConfig cfg = base;
    for (const auto& o : variant.overrides) apply_override(cfg, o);
    PreparedExperiment prep = prepare(cfg);

    Rng init_rng(prep.cfg.train.seed);
    ParamStore store;
    Network net(prep.cfg.net, store, init_rng, prep.radii);
    Trainer trainer(net, store, prep.train, prep.test, prep.cfg.train);
    TrainResult result = trainer.run();
    const double metric = primary_metric(result.final_eval, prep.cfg.net.task);

    const fs::path variant_dir = fs::path(args.output_dir) / ("variant_" + variant.name);
    fs::create_directories(variant_dir);
    write_epoch_log((variant_dir / "epochs.tsv").string(), result.log);
    checkpoint::save(store, (variant_dir / "final.ckpt").string());

    const bool has_lu = prep.cfg.net.lu_per_stage > 0;
    std::ostringstream row;
    row << variant.name << '\t' << (has_lu && prep.cfg.net.lu_use_m ? "yes" : "no") << '\t'
        << (has_lu && prep.cfg.net.lu_use_t ? "yes" : "no") << '\t'
        << (has_lu ? fusion_name(prep.cfg.net.lu_fusion) : "-") << '\t' << prep.cfg.net.k_lu
        << '\t' << std::fixed << std::setprecision(4) << metric;
    table << row.str() << '\n';
    std::cout << row.str() << '\n';
  }

  std::ofstream f(fs::path(args.output_dir) / "ablation.tsv");
  f << table.str();
  std::cout << "table written to " << (fs::path(args.output_dir) / "ablation.tsv").string()
            << "\n";
  return 0;
}

int exit_code_for(const Error& e) {
  const std::string& code = e.code();
  if (code == "config") return 2;
  if (code == "parse") return 3;
  if (code == "io") return 4;
  if (code == "insufficient_points") return 5;
  if (code == "shape" || code == "rank") return 6;
  if (code == "label") return 7;
  if (code == "degenerate_batch" || code == "degenerate_cloud") return 8;
  return 9;  // optimizer, evaluation, anything else library-raised
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("POINTLAP_THREADS")) {
    const long n = std::strtol(threads, nullptr, 10);
    if (n > 0) set_thread_count(static_cast<std::size_t>(n));
  }

  CLI::App app{"point cloud learning toolkit built around the Laplacian unit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  CommonArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a network on a synthetic task");
  add_common(train, train_args);

  CommonArgs eval_args;
  std::string eval_checkpoint;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint with voting");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();

  CommonArgs flow_args;
  std::string flow_input, flow_output;
  double flow_step = 0.5;
  std::size_t flow_iterations = 10;
  std::size_t flow_k = 8;
  CLI::App* flow = app.add_subcommand("flow", "smooth a cloud by mean curvature flow");
  add_common(flow, flow_args, /*with_format=*/true);
  flow->add_option("--input", flow_input, "input cloud file")->required();
  flow->add_option("--output", flow_output, "output cloud file")->required();
  flow->add_option("--step", flow_step, "integration step size");
  flow->add_option("--iterations", flow_iterations, "number of explicit steps");
  flow->add_option("--k", flow_k, "neighborhood size");

  CommonArgs curv_args;
  std::string curv_checkpoint, curv_input;
  std::size_t curv_stage = 0;
  CLI::App* curvature =
      app.add_subcommand("curvature", "export h_in / h_out / h_delta maps for one unit");
  add_common(curvature, curv_args);
  curvature->add_option("--checkpoint", curv_checkpoint, "checkpoint file")->required();
  curvature->add_option("--input", curv_input, "input cloud file")->required();
  curvature->add_option("--stage", curv_stage, "encoder stage to probe (0-4)");

  CommonArgs ablate_args;
  std::string grid = "mt";
  CLI::App* ablate = app.add_subcommand("ablate", "train a grid of unit variants");
  add_common(ablate, ablate_args);
  ablate->add_option("--grid", grid,
                     "mt | fusion | k | baseline | custom 'name:key=v,...;name2:...'");

  CLI::App* gencfg = app.add_subcommand("gencfg", "print the default configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) return cmd_eval(eval_args, eval_checkpoint);
    if (flow->parsed()) {
      return cmd_flow(flow_args, flow_input, flow_output, flow_step, flow_iterations, flow_k);
    }
    if (curvature->parsed()) {
      return cmd_curvature(curv_args, curv_checkpoint, curv_input, curv_stage);
    }
    if (ablate->parsed()) return cmd_ablate(ablate_args, grid);
    if (gencfg->parsed()) {
      std::cout << serialize_config(ExperimentConfig{});
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
