#include "transip/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "transip/checkpoint.hpp"
#include "transip/errors.hpp"
#include "transip/ops.hpp"
#include "transip/random.hpp"

namespace transip {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

std::vector<Rotation> sample_rotations(std::size_t count, std::mt19937_64& rng) {
  std::vector<Rotation> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_rotation_uniform(rng));
  return out;
}

}  // namespace

std::string to_string(TrainMode mode) { return mode == TrainMode::kTransIP ? "transip" : "transaug"; }

TrainMode parse_train_mode(const std::string& text) {
  if (text == "transip") return TrainMode::kTransIP;
  if (text == "transaug") return TrainMode::kTransAug;
  throw ConfigError("unknown training mode '" + text + "' (expected transip or transaug)");
}

void TrainConfig::validate() const {
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(grad_clip_norm > 0.0, "grad_clip_norm must be positive");
  require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, "warmup_fraction must be in [0, 1)");
  require(min_lr_factor >= 0.0 && min_lr_factor <= 1.0, "min_lr_factor must be in [0, 1]");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "adam betas must be in [0, 1)");
  require(adam_epsilon > 0.0, "adam_epsilon must be positive");
  require(epochs > 0, "epochs must be positive");
  require(batch_max_tokens > 0, "batch_max_tokens must be positive");
  require(validation_fraction >= 0.0 && validation_fraction < 1.0, "validation_fraction must be in [0, 1)");
  weights.validate();
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = weights;
  if (mode == TrainMode::kTransAug) w.lambda_leq = 0.0;
  return w;
}

OptimizerState OptimizerState::zeros_like(const Parameters& parameters) {
  OptimizerState s;
  for (const auto& t : parameters.tensors()) {
    s.first_moment.push_back(Tensor::zeros(t.shape()));
    s.second_moment.push_back(Tensor::zeros(t.shape()));
  }
  return s;
}

double cosine_warmup_lr(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  if (total_steps == 0 || step > total_steps) {
    throw std::out_of_range("schedule step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  const double t = static_cast<double>(step);
  const double warmup = config.warmup_fraction * static_cast<double>(total_steps);
  if (t < warmup) return config.learning_rate * t / warmup;
  const double span = static_cast<double>(total_steps) - warmup;
  const double progress = span > 0.0 ? (t - warmup) / span : 1.0;
  const double f = config.min_lr_factor;
  return config.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double total = 0.0;
  for (const auto& g : grads) {
    for (double v : g.values()) total += v * v;
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads) g = ops::scale(g.detach(), factor);
  }
  return norm;
}

void adamw_step(Parameters& parameters, const std::vector<Tensor>& grads, OptimizerState& state,
                double lr, const TrainConfig& config) {
  if (grads.size() != parameters.size() || state.first_moment.size() != parameters.size()) {
    throw std::invalid_argument("adamw_step: parameter, gradient and state counts differ");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t k = 0; k < parameters.size(); ++k) {
    Tensor p = parameters.tensors()[k];
    if (grads[k].shape() != p.shape()) {
      throw std::invalid_argument("gradient shape " + shape_str(grads[k].shape()) + " does not match " +
                                  parameters.paths()[k] + " " + shape_str(p.shape()));
    }
    auto w = p.mutable_values();
    auto m = state.first_moment[k].mutable_values();
    auto v = state.second_moment[k].mutable_values();
    const auto g = grads[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      w[i] -= lr * config.weight_decay * w[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.adam_epsilon);
    }
  }
}

LossBreakdown train_aug_loss(const Batch& batch, const Model& model, const LossWeights& weights,
                             std::span<const Rotation> rotations, const ForwardContext& context) {
  LossWeights supervised = weights;
  supervised.lambda_leq = 0.0;
  std::mt19937_64 unused(0);
  return total_loss(rotate_batch(batch, rotations), model, supervised, unused, context);
}

LossBreakdown train_aug_step(const Batch& batch, const Model& model, const LossWeights& weights,
                             std::mt19937_64& rng, const ForwardContext& context) {
  const auto rotations = sample_rotations(batch.batch_size, rng);
  return train_aug_loss(batch, model, weights, rotations, context);
}

std::string to_json_line(const LogRecord& r) {
  nlohmann::json j{{"step", r.step},         {"epoch", r.epoch},   {"lr", r.lr},
                   {"loss_total", r.loss_total}, {"loss_E", r.loss_E}, {"loss_F", r.loss_F},
                   {"loss_leq", r.loss_leq}, {"grad_norm", r.grad_norm}, {"wall_ms", r.wall_ms}};
  return j.dump();
}

LogRecord parse_log_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    LogRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.epoch = j.at("epoch").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.loss_total = j.at("loss_total").get<double>();
    r.loss_E = j.at("loss_E").get<double>();
    r.loss_F = j.at("loss_F").get<double>();
    r.loss_leq = j.at("loss_leq").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed training log record: ") + e.what());
  }
}

std::vector<LogRecord> read_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open training log " + path.string());
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_log_line(line));
  }
  return out;
}

DataSplit split_dataset(std::size_t count, double fraction, std::uint64_t seed) {
  DataSplit s;
  const auto threshold = static_cast<std::uint64_t>(fraction * 1e6);
  for (std::size_t i = 0; i < count; ++i) {
    const bool held_out = derive_seed(seed, Stream::kSplit, i) % 1000000 < threshold;
    (held_out ? s.validation : s.train).push_back(i);
  }
  return s;
}

std::vector<std::vector<std::vector<std::size_t>>> plan_epochs(std::span<const LabeledMolecule> records,
                                                              const TrainConfig& config) {
  std::vector<std::vector<std::vector<std::size_t>>> epochs;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(config.seed, Stream::kShuffle, e);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> sizes;
    for (auto i : order) sizes.push_back(records[i].size());
    auto plan = plan_batches(sizes, config.batch_max_tokens);
    for (auto& batch : plan) {
      for (auto& i : batch) i = order[i];
    }
    epochs.push_back(std::move(plan));
  }
  return epochs;
}

TrainResult train(std::span<const LabeledMolecule> dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const TrainOptions& options) {
  const Checkpoint* resume = options.resume_from;
  const ModelConfig mcfg = resume ? resume->model_config : model_config;
  const TrainConfig cfg = resume ? resume->train_config : train_config;
  mcfg.validate();
  cfg.validate();
  if (dataset.empty()) throw DataError("training dataset is empty");

  TrainResult result{resume ? load_model(*resume) : Model(mcfg, cfg.seed), {}, {}, {}, 0};
  result.split = split_dataset(dataset.size(), cfg.validation_fraction, cfg.seed);
  if (result.split.train.empty()) throw DataError("no training records left after the validation split");
  std::vector<LabeledMolecule> records;
  for (auto i : result.split.train) records.push_back(dataset[i]);

  const auto epochs = plan_epochs(records, cfg);
  for (const auto& e : epochs) result.total_steps += e.size();
  if (resume && resume->optimizer) {
    result.optimizer = *resume->optimizer;
  } else {
    result.optimizer = OptimizerState::zeros_like(result.model.parameters());
  }
  const std::size_t start = result.optimizer.step;
  const LossWeights weights = cfg.effective_weights();

  std::ofstream log;
  auto save = [&](const std::string& name, std::size_t epoch) {
    if (options.out_dir.empty()) return;
    checkpoint_write(options.out_dir / name,
                     make_checkpoint(result.model, cfg, &result.optimizer, epoch, result.total_steps,
                                     options.dataset_digest));
  };
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot write training log in " + options.out_dir.string());
    nlohmann::json split{{"seed", cfg.seed},
                         {"validation_fraction", cfg.validation_fraction},
                         {"train", result.split.train},
                         {"validation", result.split.validation}};
    std::ofstream(options.out_dir / "split.json") << split.dump() << "\n";
    if (!resume) save("checkpoint_init.tipc", 0);
  }

  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    bool ran = false;
    for (std::size_t b = 0; b < epochs[e].size(); ++b) {
      ++step;
      if (step <= start) continue;
      ran = true;
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<LabeledMolecule> members;
      for (auto i : epochs[e][b]) members.push_back(records[i]);
      const Batch batch = collate(members);
      auto dropout_rng = make_rng(cfg.seed, Stream::kDropout, step);
      auto rotation_rng = make_rng(cfg.seed, Stream::kRotation, step);
      const ForwardContext context{&dropout_rng};
      const std::string where = "step " + std::to_string(step) + " (epoch " + std::to_string(e + 1) +
                                ", batch " + std::to_string(b) + ")";

      LossBreakdown loss = cfg.mode == TrainMode::kTransIP
                               ? total_loss(batch, result.model, weights, rotation_rng, context)
                               : train_aug_step(batch, result.model, weights, rotation_rng, context);
      const double value = loss.total.item();
      if (!std::isfinite(value)) throw NumericError("non-finite loss at " + where);
      std::vector<Tensor> grads;
      try {
        grads = grad(loss.total, result.model.parameters().tensors());
      } catch (const std::runtime_error& err) {
        throw NumericError("non-finite gradient at " + where + ": " + err.what());
      }
      LogRecord record;
      record.loss_total = value;
      record.loss_E = loss.energy;
      record.loss_F = loss.force;
      record.loss_leq = loss.latent;
      loss = {};
      record.step = step;
      record.epoch = e + 1;
      record.grad_norm = clip_grad_norm(grads, cfg.grad_clip_norm);
      record.lr = cosine_warmup_lr(step, result.total_steps, cfg);
      adamw_step(result.model.parameters(), grads, result.optimizer, record.lr, cfg);
      record.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(record);
      if (log.is_open()) log << to_json_line(record) << "\n" << std::flush;
      if (options.on_step) options.on_step(record);
      if (options.stop_after_step && step >= *options.stop_after_step) return result;
    }
    if (ran) save("checkpoint_epoch" + std::to_string(e + 1) + ".tipc", e + 1);
  }
  save("checkpoint_final.tipc", epochs.size());
  return result;
}

}  // namespace transip
