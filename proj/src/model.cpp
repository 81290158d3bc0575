#include "transip/model.hpp"

#include <cmath>
#include <stdexcept>

#include "transip/errors.hpp"
#include "transip/ops.hpp"
#include "transip/random.hpp"

namespace transip {

using namespace transip::ops;

namespace {

constexpr double kInitStd = 0.02;

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void add_linear(Parameters& p, const std::string& name, std::size_t in, std::size_t out) {
  p.add(name + ".weight", Tensor::zeros({in, out}));
  p.add(name + ".bias", Tensor::zeros({out}));
}

void add_norm(Parameters& p, const std::string& name, std::size_t width) {
  p.add(name + ".gain", Tensor::zeros({width}));
  p.add(name + ".bias", Tensor::zeros({width}));
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Tensor apply_linear(const Tensor& x, const Model& model, const std::string& name) {
  return linear(x, model[name + ".weight"], model[name + ".bias"]);
}

Tensor apply_norm(const Tensor& x, const Model& model, const std::string& name) {
  return layer_norm(x, model[name + ".gain"], model[name + ".bias"]);
}

Tensor mlp2(const Tensor& x, const Model& model, const std::string& name) {
  return apply_linear(gelu(apply_linear(x, model, name + ".fc1")), model, name + ".fc2");
}

Tensor counts_tensor(const Batch& batch) {
  std::vector<double> counts(batch.atom_counts.begin(), batch.atom_counts.end());
  return Tensor({batch.batch_size, 1}, std::move(counts));
}

}  // namespace

void ModelConfig::validate() const {
  require(hidden_dim > 0 && num_layers > 0 && num_heads > 0, "model dimensions must be positive");
  require(hidden_dim % 2 == 0, "hidden_dim must be even, got " + std::to_string(hidden_dim));
  require(hidden_dim % num_heads == 0, "hidden_dim " + std::to_string(hidden_dim) +
                                           " is not divisible by num_heads " +
                                           std::to_string(num_heads));
  require(head_dim() % 2 == 0, "head dimension " + std::to_string(head_dim()) + " must be even");
  require(context_length > 0 && context_length <= kContextLength,
          "context_length must be in [1, " + std::to_string(kContextLength) + "]");
  require(projection_dropout >= 0.0 && projection_dropout < 1.0, "projection_dropout must be in [0, 1)");
  require(attention_dropout >= 0.0 && attention_dropout < 1.0, "attention_dropout must be in [0, 1)");
  require(feedforward_multiplier > 0, "feedforward_multiplier must be positive");
  require(charge_vocab_range >= 0, "charge_vocab_range must be non-negative");
  require(spin_vocab_range >= 1, "spin_vocab_range must be at least 1");
  require(ttau_layers >= 1, "ttau_layers must be at least 1");
  require(ttau_hidden_multiplier > 0, "ttau_hidden_multiplier must be positive");
}

void Parameters::add(std::string path, Tensor value) {
  if (index_.count(path)) throw std::invalid_argument("duplicate parameter " + path);
  index_.emplace(path, tensors_.size());
  paths_.push_back(std::move(path));
  tensors_.push_back(std::move(value));
}

bool Parameters::contains(std::string_view path) const { return index_.count(std::string(path)) != 0; }

std::size_t Parameters::index_of(std::string_view path) const {
  auto it = index_.find(std::string(path));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(path));
  return it->second;
}

const Tensor& Parameters::operator[](std::string_view path) const { return tensors_[index_of(path)]; }

void Parameters::assign(std::size_t index, Tensor value) {
  if (value.shape() != tensors_.at(index).shape()) {
    throw std::invalid_argument("shape mismatch assigning " + paths_[index] + ": " +
                                shape_str(tensors_[index].shape()) + " vs " + shape_str(value.shape()));
  }
  tensors_[index] = std::move(value);
}

std::size_t Parameters::count() const {
  std::size_t total = 0;
  for (const auto& t : tensors_) total += t.numel();
  return total;
}

Parameters parameter_layout(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_dim, half = d / 2;
  Parameters p;
  p.add("embed.atom.table", Tensor::zeros({kMaxAtomicNumber + 1, half}));
  add_linear(p, "embed.atom.fc1", half, half);
  add_linear(p, "embed.atom.fc2", half, half);
  add_linear(p, "embed.coord.fc1", 3, half);
  add_linear(p, "embed.coord.fc2", half, half);
  p.add("embed.charge.table", Tensor::zeros({static_cast<std::size_t>(2 * config.charge_vocab_range + 1), d}));
  p.add("embed.spin.table", Tensor::zeros({static_cast<std::size_t>(config.spin_vocab_range), d}));
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    add_norm(p, prefix + "attn_norm", d);
    add_linear(p, prefix + "attn.query", d, d);
    add_linear(p, prefix + "attn.key", d, d);
    add_linear(p, prefix + "attn.value", d, d);
    add_linear(p, prefix + "attn.output", d, d);
    add_norm(p, prefix + "ff_norm", d);
    add_linear(p, prefix + "ff.fc1", d, config.feedforward_multiplier * d);
    add_linear(p, prefix + "ff.fc2", config.feedforward_multiplier * d, d);
  }
  add_norm(p, "final_norm", d);
  add_linear(p, "energy.fc1", d, d);
  add_linear(p, "energy.fc2", d, 1);
  const std::size_t hidden = config.ttau_hidden_multiplier * d;
  for (std::size_t l = 0; l < config.ttau_layers; ++l) {
    const std::size_t in = l == 0 ? 9 + d : hidden;
    const std::size_t out = l + 1 == config.ttau_layers ? d : hidden;
    add_linear(p, "ttau.fc" + std::to_string(l + 1), in, out);
  }
  return p;
}

Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  Parameters layout = parameter_layout(config);
  Parameters out;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::string& path = layout.paths()[i];
    Tensor t = layout.tensors()[i].clone();
    auto values = t.mutable_values();
    auto rng = make_rng(seed, Stream::kInit, i);
    std::normal_distribution<double> normal(0.0, 1.0);
    if (ends_with(path, ".weight")) {
      for (auto& v : values) {
        double z;
        do z = normal(rng);
        while (std::abs(z) > 2.0);
        v = kInitStd * z;
      }
    } else if (ends_with(path, ".table")) {
      for (auto& v : values) v = kInitStd * normal(rng);
    } else if (ends_with(path, ".gain")) {
      for (auto& v : values) v = 1.0;
    }
    t.requires_grad_(true);
    out.add(path, t);
  }
  return out;
}

Model::Model(ModelConfig config, std::uint64_t seed)
    : config_(config), parameters_(init_parameters(config, seed)) {}

Model::Model(ModelConfig config, Parameters parameters) : config_(config) {
  Parameters layout = parameter_layout(config_);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::string& path = layout.paths()[i];
    if (!parameters.contains(path)) continue;
    const Tensor& t = parameters[path];
    if (t.shape() != layout.tensors()[i].shape()) {
      throw ConfigError("parameter " + path + " has shape " + shape_str(t.shape()) +
                        " but the model config expects " + shape_str(layout.tensors()[i].shape()));
    }
  }
  for (const auto& path : layout.paths()) {
    if (!parameters.contains(path)) throw ConfigError("parameter set is missing " + path);
  }
  if (parameters.size() != layout.size()) {
    throw ConfigError("parameter set has " + std::to_string(parameters.size()) +
                      " tensors but the model config needs " + std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::string& path = layout.paths()[i];
    const Tensor& t = parameters[path];
    Tensor leaf = t.detach();
    leaf.requires_grad_(true);
    parameters_.add(path, leaf);
  }
}

Tensor token_mask_tensor(const Batch& batch) {
  return Tensor({batch.batch_size, batch.max_atoms, 1}, batch.token_mask);
}

Tensor attention_mask_tensor(const Batch& batch) {
  return Tensor({batch.batch_size, batch.max_atoms, batch.max_atoms}, batch.attention_mask);
}

Tensor coordinate_tensor(const Batch& batch) {
  return Tensor({batch.batch_size, batch.max_atoms, 3}, batch.coordinates);
}

Tensor embed_tokens(const Batch& batch, const Tensor& coordinates, const Model& model) {
  const std::size_t B = batch.batch_size, N = batch.max_atoms;
  std::vector<std::int64_t> z(B * N, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < batch.atom_counts[b]; ++i) {
      const std::int64_t value = batch.atomic_numbers[b * N + i];
      if (value < 1 || value > kMaxAtomicNumber) {
        throw std::invalid_argument("atomic number " + std::to_string(value) +
                                    " outside the embedding table [1, " +
                                    std::to_string(kMaxAtomicNumber) + "]");
      }
      z[b * N + i] = value;
    }
  }
  Tensor atoms = mlp2(embedding(model["embed.atom.table"], z, {B, N}), model, "embed.atom");
  Tensor coords = mlp2(coordinates, model, "embed.coord");
  return mul(concat_last({atoms, coords}), token_mask_tensor(batch));
}

Tensor global_bias(int charge, int spin, const Model& model) {
  const auto& cfg = model.config();
  if (charge < -cfg.charge_vocab_range || charge > cfg.charge_vocab_range) {
    throw std::invalid_argument("charge " + std::to_string(charge) + " outside [-" +
                                std::to_string(cfg.charge_vocab_range) + ", " +
                                std::to_string(cfg.charge_vocab_range) + "]");
  }
  if (spin < 1 || spin > cfg.spin_vocab_range) {
    throw std::invalid_argument("spin multiplicity " + std::to_string(spin) + " outside [1, " +
                                std::to_string(cfg.spin_vocab_range) + "]");
  }
  const std::int64_t qi = charge + cfg.charge_vocab_range, si = spin - 1;
  Tensor bias = add(embedding(model["embed.charge.table"], std::span(&qi, 1), {1}),
                    embedding(model["embed.spin.table"], std::span(&si, 1), {1}));
  return reshape(bias, {cfg.hidden_dim});
}

Tensor global_bias(const Batch& batch, const Model& model) {
  const auto& cfg = model.config();
  std::vector<std::int64_t> q, s;
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    global_bias(batch.charges[b], batch.spins[b], model);
    q.push_back(batch.charges[b] + cfg.charge_vocab_range);
    s.push_back(batch.spins[b] - 1);
  }
  const Shape index_shape{batch.batch_size, 1};
  return add(embedding(model["embed.charge.table"], q, index_shape),
             embedding(model["embed.spin.table"], s, index_shape));
}

std::vector<double> rope_apply(std::span<const double> x, std::size_t position, double base) {
  const std::size_t d = x.size();
  if (d % 2 != 0) throw std::invalid_argument("rope needs an even dimension, got " + std::to_string(d));
  std::vector<double> out(d);
  for (std::size_t k = 0; k < d / 2; ++k) {
    const double theta = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * theta;
    const double c = std::cos(angle), s = std::sin(angle);
    out[2 * k] = x[2 * k] * c - x[2 * k + 1] * s;
    out[2 * k + 1] = x[2 * k] * s + x[2 * k + 1] * c;
  }
  return out;
}

Tensor attention_layer(const Tensor& tokens, const Tensor& mask, const Model& model,
                       std::size_t layer, const ForwardContext& context) {
  const auto& cfg = model.config();
  const std::string prefix = "layers." + std::to_string(layer) + ".";
  const std::size_t dh = cfg.head_dim();

  Tensor x = apply_norm(tokens, model, prefix + "attn_norm");
  Tensor q = scale(apply_linear(x, model, prefix + "attn.query"), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor k = apply_linear(x, model, prefix + "attn.key");
  Tensor v = apply_linear(x, model, prefix + "attn.value");
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    Tensor qh = rope(slice_last(q, h * dh, dh));
    Tensor kh = rope(slice_last(k, h * dh, dh));
    Tensor probs = masked_softmax(matmul(qh, kh, false, true), mask);
    probs = dropout(probs, cfg.attention_dropout, context.dropout_rng);
    heads.push_back(matmul(probs, slice_last(v, h * dh, dh)));
  }
  Tensor attended = apply_linear(concat_last(heads), model, prefix + "attn.output");
  Tensor hidden = add(tokens, dropout(attended, cfg.projection_dropout, context.dropout_rng));

  Tensor y = apply_norm(hidden, model, prefix + "ff_norm");
  y = mlp2(y, model, prefix + "ff");
  return add(hidden, dropout(y, cfg.projection_dropout, context.dropout_rng));
}

Tensor forward_embed(const Batch& batch, const Tensor& coordinates, const Model& model,
                     const ForwardContext& context) {
  Tensor tokens = embed_tokens(batch, masked_center(coordinates, batch.atom_counts), model);
  const Tensor mask = attention_mask_tensor(batch);
  const Tensor bias = global_bias(batch, model);
  for (std::size_t l = 0; l < model.config().num_layers; ++l) {
    tokens = attention_layer(add(tokens, bias), mask, model, l, context);
  }
  return mul(apply_norm(tokens, model, "final_norm"), token_mask_tensor(batch));
}

Tensor aggregate_energy(const Tensor& embeddings, const Batch& batch, const Model& model) {
  Tensor pooled = div(sum(mul(embeddings, token_mask_tensor(batch)), 1), counts_tensor(batch));
  return reshape(mlp2(pooled, model, "energy"), {batch.batch_size});
}

Tensor transform_latent(std::span<const Rotation> rotations, const Tensor& embeddings,
                        const Batch& batch, const Model& model) {
  const std::size_t B = batch.batch_size, N = batch.max_atoms;
  if (rotations.size() != B) throw std::invalid_argument("transform_latent needs one rotation per molecule");
  std::vector<double> flat;
  flat.reserve(B * 9);
  for (const auto& g : rotations) {
    const auto f = g.flattened();
    flat.insert(flat.end(), f.begin(), f.end());
  }
  Tensor group = broadcast_to(Tensor({B, 1, 9}, std::move(flat)), {B, N, 9});
  Tensor x = concat_last({group, embeddings});
  const std::size_t layers = model.config().ttau_layers;
  for (std::size_t l = 0; l < layers; ++l) {
    x = apply_linear(x, model, "ttau.fc" + std::to_string(l + 1));
    if (l + 1 < layers) x = gelu(x);
  }
  return mul(x, token_mask_tensor(batch));
}

Prediction predict(const Batch& batch, const Model& model, bool create_graph,
                   const ForwardContext& context) {
  GradModeGuard recording(true);
  Prediction out;
  out.coordinates = coordinate_tensor(batch).requires_grad_(true);
  out.embeddings = forward_embed(batch, out.coordinates, model, context);
  out.energy = aggregate_energy(out.embeddings, batch, model);
  Tensor dE = grad(sum_all(out.energy), {out.coordinates}, create_graph)[0];
  out.forces = neg(dE);
  if (!create_graph) out.forces = out.forces.detach();
  return out;
}

std::vector<double> embedding_rows(const Tensor& embeddings, const Batch& batch, std::size_t row) {
  const std::size_t N = batch.max_atoms, d = embeddings.dim(-1);
  const auto v = embeddings.values();
  const auto begin = v.begin() + static_cast<std::ptrdiff_t>(row * N * d);
  return std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(batch.atom_counts[row] * d));
}

std::vector<MoleculePrediction> predict_molecules(const Batch& batch, const Model& model) {
  const Prediction p = predict(batch, model, false);
  const std::size_t N = batch.max_atoms;
  const auto e = p.energy.values();
  const auto f = p.forces.values();
  std::vector<MoleculePrediction> out(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    out[b].energy = e[b];
    for (std::size_t i = 0; i < batch.atom_counts[b]; ++i) {
      const double* r = f.data() + (b * N + i) * 3;
      out[b].forces.emplace_back(r[0], r[1], r[2]);
    }
  }
  return out;
}

}  // namespace transip
