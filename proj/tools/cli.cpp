#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <regex>

#include "transip/checkpoint.hpp"
#include "transip/dataset_io.hpp"
#include "transip/errors.hpp"
#include "transip/eval.hpp"
#include "transip/lj_oracle.hpp"
#include "transip/run_config.hpp"
#include "transip/train.hpp"

namespace fs = std::filesystem;

namespace transip {

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool dry_run = false;
  std::vector<std::string> overrides;
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

RunConfig resolve(const GlobalOptions& g) {
  RunConfig config = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  for (const auto& o : g.overrides) apply_override(config, o);
  return config;
}

void refuse_overwrite(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw ConfigError(path.string() + " already exists (pass --force to overwrite)");
  }
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void echo_config(const RunConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream(dir / "config.resolved.ini") << to_ini(config);
}

std::vector<LabeledMolecule> load_dataset(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("dataset " + path.string() + " does not exist");
  auto records = read_dataset(path);
  if (records.empty()) throw DataError("dataset " + path.string() + " is empty");
  return records;
}

fs::path eval_data_path(const RunConfig& config, const std::string& flag) {
  if (!flag.empty()) return flag;
  return config.data.eval_path.empty() ? config.data.path : config.data.eval_path;
}

/// With an explicit config, the checkpoint must fit its model section.
Model open_model(const fs::path& path, const GlobalOptions& g, const RunConfig& config) {
  const Checkpoint checkpoint = checkpoint_read(path);
  if (g.config.empty() && g.overrides.empty()) return load_model(checkpoint);
  return Model(config.model, checkpoint.parameters);
}

void write_manifest(const fs::path& path, const GeneratorConfig& gen, std::size_t written,
                    const std::string& digest) {
  nlohmann::json table = nlohmann::json::array();
  for (int z : gen.element_palette) {
    const auto& p = LjTable::standard().at(z);
    table.push_back({{"z", z}, {"epsilon", p.epsilon}, {"sigma", p.sigma}});
  }
  const nlohmann::json manifest = {{"seed", gen.seed},
                                   {"count", written},
                                   {"atoms_min", gen.atoms_min},
                                   {"atoms_max", gen.atoms_max},
                                   {"palette", gen.element_palette},
                                   {"lj_table", table},
                                   {"mixing", "lorentz-berthelot"},
                                   {"sha256", digest}};
  std::ofstream(path) << manifest.dump(2) << "\n";
}

int gen_data(const GlobalOptions& g, RunConfig config, const std::optional<std::size_t>& count,
             const std::optional<std::size_t>& atoms_min, const std::optional<std::size_t>& atoms_max,
             const std::vector<int>& palette, std::ostream& out) {
  auto& gen = config.data.generator;
  if (count) gen.count = *count;
  if (atoms_min) gen.atoms_min = *atoms_min;
  if (atoms_max) gen.atoms_max = *atoms_max;
  if (!palette.empty()) gen.element_palette = palette;
  if (g.seed) gen.seed = *g.seed;
  if (!g.out.empty()) config.data.path = g.out;
  config.validate();
  const fs::path path = config.data.path;
  const fs::path manifest = path.string() + ".manifest.json";
  refuse_overwrite(path, g.force);
  refuse_overwrite(manifest, g.force);
  if (g.dry_run) {
    out << "would write " << gen.count << " molecules to " << path.string() << "\n";
    return kExitOk;
  }
  ensure_parent(path);
  const auto records = generate_lj_dataset(gen);
  write_dataset(records, path);
  const std::string digest = file_digest(path);
  write_manifest(manifest, gen, records.size(), digest);
  out << "wrote " << records.size() << " molecules to " << path.string() << " (sha256 " << digest << ")\n";
  return kExitOk;
}

int train_cmd(const GlobalOptions& g, RunConfig config, const std::string& mode, const std::string& data,
              const std::string& resume, std::ostream& out) {
  if (!mode.empty()) config.train.mode = parse_train_mode(mode);
  if (g.seed) config.train.seed = *g.seed;
  if (!g.out.empty()) config.out_dir = g.out;
  if (!data.empty()) config.data.path = data;

  std::optional<Checkpoint> checkpoint;
  if (!resume.empty()) {
    checkpoint = checkpoint_read(resume);
    if (!checkpoint->optimizer) throw DataError(resume + " has no optimizer state to resume from");
    config.model = checkpoint->model_config;
    config.train = checkpoint->train_config;
  }
  config.validate();
  const fs::path dir = config.out_dir;

  if (g.dry_run) {
    const Model model(config.model, config.train.seed);
    out << "parameters: " << model.parameters().count() << "\n";
    out << to_ini(config);
    return kExitOk;
  }

  const auto records = load_dataset(config.data.path);
  const std::string digest = file_digest(config.data.path);
  if (checkpoint && !checkpoint->dataset_digest.empty() && checkpoint->dataset_digest != digest) {
    throw DataError("dataset " + config.data.path + " does not match the digest stored in " + resume);
  }
  if (!checkpoint) refuse_overwrite(dir / "train_log.jsonl", g.force);
  echo_config(config, dir);

  TrainOptions options;
  options.out_dir = dir;
  options.resume_from = checkpoint ? &*checkpoint : nullptr;
  options.dataset_digest = digest;
  options.on_step = [&out](const LogRecord& r) {
    if (r.step % 100 == 0) out << to_json_line(r) << "\n" << std::flush;
  };
  const auto result = train(records, config.model, config.train, options);
  out << "trained " << result.total_steps << " steps (" << to_string(config.train.mode) << "), outputs in "
      << dir.string() << "\n";
  return kExitOk;
}

int eval_cmd(const GlobalOptions& g, RunConfig config, const std::vector<std::string>& checkpoints,
             const std::string& data, std::optional<std::size_t> rotations, std::ostream& out) {
  if (g.seed) config.probe.seed = *g.seed;
  if (rotations) config.probe.rotations = *rotations;
  config.validate();
  const fs::path csv = g.out.empty() ? fs::path(config.out_dir) / "metrics.csv" : fs::path(g.out);
  refuse_overwrite(csv, g.force);
  const auto records = load_dataset(eval_data_path(config, data));
  const auto categories = categorize(records);
  const EvalOptions options{config.probe.rotations, config.probe.seed, config.train.batch_max_tokens};

  std::vector<std::pair<std::string, Model>> models;
  for (const auto& path : checkpoints) models.emplace_back(path, open_model(path, g, config));
  if (g.dry_run) {
    out << "would evaluate " << models.size() << " checkpoint(s) on " << records.size() << " molecules\n";
    return kExitOk;
  }
  ensure_parent(csv);
  std::ofstream file(csv);
  if (!file) throw DataError("cannot write " + csv.string());
  write_metric_csv_header(file);
  for (const auto& [path, model] : models) {
    for (const auto& [tag, members] : categories) write_metric_csv_row(file, path, evaluate(model, members, tag, options));
  }
  out << "wrote " << csv.string() << "\n";
  return kExitOk;
}

int probe_cmd(const GlobalOptions& g, RunConfig config, const std::vector<std::string>& checkpoints,
              const std::string& data, std::optional<std::size_t> rotations, std::ostream& out) {
  if (g.seed) config.probe.seed = *g.seed;
  if (rotations) config.probe.rotations = *rotations;
  config.validate();
  const fs::path csv = g.out.empty() ? fs::path(config.out_dir) / "probe.csv" : fs::path(g.out);
  refuse_overwrite(csv, g.force);
  const auto records = load_dataset(eval_data_path(config, data));
  std::vector<Molecule> molecules;
  for (const auto& r : records) molecules.push_back(r.molecule);

  std::vector<std::pair<std::string, Model>> models;
  for (const auto& path : checkpoints) models.emplace_back(path, open_model(path, g, config));
  if (g.dry_run) {
    out << "would probe " << models.size() << " checkpoint(s) on " << molecules.size() << " molecules\n";
    return kExitOk;
  }
  ensure_parent(csv);
  std::ofstream file(csv);
  if (!file) throw DataError("cannot write " + csv.string());
  file << "checkpoint,n,rotations,seed,latent_equiv,energy_rotinv_err,force_equiv_err\n";
  const std::size_t K = config.probe.rotations;
  const std::uint64_t seed = config.probe.seed;
  for (const auto& [path, model] : models) {
    const double latent =
        latent_equivariance_probe(model, molecules, K, seed, config.train.batch_max_tokens);
    const auto outputs =
        output_equivariance_probe(model_predictor(model, config.train.batch_max_tokens), molecules, K, seed);
    file << path << "," << molecules.size() << "," << K << "," << seed << "," << format_double(latent) << ","
         << format_double(outputs.energy_invariance_error) << ","
         << format_double(outputs.force_equivariance_error) << "\n";
  }
  out << "wrote " << csv.string() << "\n";
  return kExitOk;
}

/// init, epoch 1..E in numeric order, then final.
std::vector<fs::path> run_checkpoints(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("run directory " + dir.string() + " does not exist");
  static const std::regex epoch_name(R"(checkpoint_epoch(\d+)\.tipc)");
  std::vector<std::pair<std::size_t, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    std::smatch m;
    if (name == "checkpoint_init.tipc") {
      found.emplace_back(0, entry.path());
    } else if (std::regex_match(name, m, epoch_name)) {
      found.emplace_back(1 + std::stoull(m[1].str()), entry.path());
    } else if (name == "checkpoint_final.tipc") {
      found.emplace_back(SIZE_MAX, entry.path());
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [rank, path] : found) out.push_back(path);
  if (out.empty()) throw DataError("no checkpoints in " + dir.string());
  return out;
}

int export_cmd(const GlobalOptions& g, RunConfig config, const std::vector<std::string>& runs,
               const std::string& data, std::optional<std::size_t> rotations, std::ostream& out) {
  if (g.seed) config.probe.seed = *g.seed;
  if (rotations) config.probe.rotations = *rotations;
  config.validate();
  const fs::path csv = g.out.empty() ? fs::path(config.out_dir) / "plot_data.csv" : fs::path(g.out);
  refuse_overwrite(csv, g.force);
  const auto records = load_dataset(eval_data_path(config, data));
  std::vector<fs::path> checkpoints;
  for (const auto& run : runs) {
    for (auto& p : run_checkpoints(run)) checkpoints.push_back(std::move(p));
  }
  if (g.dry_run) {
    for (const auto& p : checkpoints) out << p.string() << "\n";
    return kExitOk;
  }
  ensure_parent(csv);
  const auto categories = categorize(records);
  compare_models(checkpoints, categories, csv,
                 {config.probe.rotations, config.probe.seed, config.train.batch_max_tokens});
  out << "wrote " << csv.string() << " (" << checkpoints.size() << " checkpoints)\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer interatomic potentials with learned rotation equivariance", "transip"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "INI run config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for the subcommand's random streams");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("--force", g.force, "Overwrite existing outputs");
  app.add_flag("--dry-run", g.dry_run, "Validate and report without computing");
  app.add_option("--set", g.overrides, "Config override section.key=value (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "Generate a labelled Lennard-Jones dataset")->fallthrough();
  std::optional<std::size_t> count, atoms_min, atoms_max;
  std::vector<int> palette;
  gen->add_option("--count", count);
  gen->add_option("--atoms-min", atoms_min);
  gen->add_option("--atoms-max", atoms_max);
  gen->add_option("--palette", palette, "Atomic numbers")->delimiter(',');

  auto* tr = app.add_subcommand("train", "Train a model")->fallthrough();
  std::string mode, data, resume;
  tr->add_option("--mode", mode, "transip or transaug");
  tr->add_option("--data", data, "Dataset (default data.path)");
  tr->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  std::vector<std::string> checkpoints;
  std::optional<std::size_t> rotations;
  auto* ev = app.add_subcommand("eval", "Metrics CSV for checkpoints")->fallthrough();
  ev->add_option("--checkpoint", checkpoints)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Dataset (default data.eval_path, then data.path)");
  ev->add_option("--rotations", rotations);

  auto* pr = app.add_subcommand("probe", "Equivariance probe CSV for checkpoints")->fallthrough();
  pr->add_option("--checkpoint", checkpoints)->required()->check(CLI::ExistingFile);
  pr->add_option("--data", data);
  pr->add_option("--rotations", rotations);

  std::vector<std::string> runs;
  auto* ex = app.add_subcommand("export-plot-data", "Metrics for every checkpoint of some runs")->fallthrough();
  ex->add_option("--run", runs, "Run directory (repeatable)")->required();
  ex->add_option("--data", data);
  ex->add_option("--rotations", rotations);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig config = resolve(g);
    if (*gen) return gen_data(g, config, count, atoms_min, atoms_max, palette, out);
    if (*tr) return train_cmd(g, config, mode, data, resume, out);
    if (*ev) return eval_cmd(g, config, checkpoints, data, rotations, out);
    if (*pr) return probe_cmd(g, config, checkpoints, data, rotations, out);
    if (*ex) return export_cmd(g, config, runs, data, rotations, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return kExitOther;
}

}  // namespace transip
