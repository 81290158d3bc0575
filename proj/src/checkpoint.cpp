#include "transip/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "transip/dataset_io.hpp"
#include "transip/errors.hpp"

namespace transip {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'I', 'P', 'C'};
constexpr std::size_t kDigestSize = 64;  // hex SHA-256
const std::string kMomentPrefix[2] = {"optimizer.m.", "optimizer.v."};

template <class T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

void put_record(std::string& out, const std::string& path, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(path.size()));
  out += path;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  const auto v = t.values();
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw DataError("checkpoint truncated at byte offset " + std::to_string(pos_) + " while reading " +
                      what + " (" + std::to_string(n) + " bytes needed, " +
                      std::to_string(bytes_.size() - pos_) + " available)");
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  template <class T>
  T get(const char* what) {
    T value;
    take(&value, sizeof(T), what);
    return value;
  }

  std::string get_string(std::size_t n, const char* what) {
    if (n > remaining()) take(nullptr, n, what);
    std::string s(n, '\0');
    take(s.data(), n, what);
    return s;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"hidden_dim", c.hidden_dim},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"context_length", c.context_length},
          {"projection_dropout", c.projection_dropout},
          {"attention_dropout", c.attention_dropout},
          {"feedforward_multiplier", c.feedforward_multiplier},
          {"charge_vocab_range", c.charge_vocab_range},
          {"spin_vocab_range", c.spin_vocab_range},
          {"ttau_layers", c.ttau_layers},
          {"ttau_hidden_multiplier", c.ttau_hidden_multiplier}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.context_length = j.at("context_length").get<std::size_t>();
  c.projection_dropout = j.at("projection_dropout").get<double>();
  c.attention_dropout = j.at("attention_dropout").get<double>();
  c.feedforward_multiplier = j.at("feedforward_multiplier").get<std::size_t>();
  c.charge_vocab_range = j.at("charge_vocab_range").get<int>();
  c.spin_vocab_range = j.at("spin_vocab_range").get<int>();
  c.ttau_layers = j.at("ttau_layers").get<std::size_t>();
  c.ttau_hidden_multiplier = j.at("ttau_hidden_multiplier").get<std::size_t>();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"warmup_fraction", c.warmup_fraction},
          {"min_lr_factor", c.min_lr_factor},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"epochs", c.epochs},
          {"batch_max_tokens", c.batch_max_tokens},
          {"validation_fraction", c.validation_fraction},
          {"seed", c.seed},
          {"mode", to_string(c.mode)},
          {"lambda_E", c.weights.lambda_E},
          {"lambda_F", c.weights.lambda_F},
          {"lambda_leq", c.weights.lambda_leq}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  c.warmup_fraction = j.at("warmup_fraction").get<double>();
  c.min_lr_factor = j.at("min_lr_factor").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_epsilon = j.at("adam_epsilon").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_max_tokens = j.at("batch_max_tokens").get<std::size_t>();
  c.validation_fraction = j.at("validation_fraction").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.mode = parse_train_mode(j.at("mode").get<std::string>());
  c.weights.lambda_E = j.at("lambda_E").get<double>();
  c.weights.lambda_F = j.at("lambda_F").get<double>();
  c.weights.lambda_leq = j.at("lambda_leq").get<double>();
  return c;
}

void checkpoint_write(std::ostream& out, const Checkpoint& ck) {
  nlohmann::json header{{"model", to_json(ck.model_config)},
                        {"train", to_json(ck.train_config)},
                        {"step", ck.step},
                        {"epoch", ck.epoch},
                        {"total_steps", ck.total_steps},
                        {"dataset_digest", ck.dataset_digest},
                        {"has_optimizer", ck.optimizer.has_value()}};
  const std::string text = header.dump();
  std::string bytes(kMagic, 4);
  put<std::uint32_t>(bytes, kCheckpointVersion);
  put<std::uint64_t>(bytes, text.size());
  bytes += text;
  const std::size_t n = ck.parameters.size();
  put<std::uint64_t>(bytes, ck.optimizer ? 3 * n : n);
  for (std::size_t i = 0; i < n; ++i) put_record(bytes, ck.parameters.paths()[i], ck.parameters.tensors()[i]);
  if (ck.optimizer) {
    for (std::size_t i = 0; i < n; ++i) {
      put_record(bytes, kMomentPrefix[0] + ck.parameters.paths()[i], ck.optimizer->first_moment[i]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      put_record(bytes, kMomentPrefix[1] + ck.parameters.paths()[i], ck.optimizer->second_moment[i]);
    }
  }
  bytes += sha256_hex(bytes);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint");
}

void checkpoint_write(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    checkpoint_write(out, checkpoint);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_read(std::istream& in) {
  std::ostringstream buffer;
  buffer << in.rdbuf();
  const std::string bytes = buffer.str();
  Reader r(bytes);

  char magic[4];
  r.take(magic, 4, "magic bytes");
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a checkpoint file: bad magic bytes");
  const auto version = r.get<std::uint32_t>("format version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint format version " + std::to_string(version) +
                    " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_size = r.get<std::uint64_t>("header length");
  const std::string text = r.get_string(header_size, "config header");

  Checkpoint ck;
  bool has_optimizer = false;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.model_config = model_config_from_json(header.at("model"));
    ck.train_config = train_config_from_json(header.at("train"));
    ck.step = header.at("step").get<std::size_t>();
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.total_steps = header.at("total_steps").get<std::size_t>();
    ck.dataset_digest = header.at("dataset_digest").get<std::string>();
    has_optimizer = header.at("has_optimizer").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }

  const auto count = r.get<std::uint64_t>("record count");
  std::vector<std::pair<std::string, Tensor>> records;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto length = r.get<std::uint32_t>("path length");
    std::string path = r.get_string(length, "parameter path");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape;
    if (rank > 8) throw DataError("checkpoint record " + path + " has implausible rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint64_t>("dimensions"));
    const std::size_t numel = shape_numel(shape);
    if (numel > r.remaining() / sizeof(double)) {
      throw DataError("checkpoint truncated at byte offset " + std::to_string(r.offset()) + " in the values of " +
                      path + " " + shape_str(shape));
    }
    std::vector<double> values(numel);
    r.take(values.data(), values.size() * sizeof(double), "parameter values");
    records.emplace_back(std::move(path), Tensor(shape, std::move(values)));
  }
  const std::size_t body = r.offset();
  const std::string digest = r.get_string(kDigestSize, "digest");
  if (digest != sha256_hex(bytes.substr(0, body))) throw DataError("checkpoint digest mismatch: file is corrupt");
  if (r.offset() != bytes.size()) {
    throw DataError("checkpoint has " + std::to_string(bytes.size() - r.offset()) + " trailing bytes");
  }

  const std::size_t n = has_optimizer ? records.size() / 3 : records.size();
  if (has_optimizer && records.size() != 3 * n) throw DataError("checkpoint optimizer records are incomplete");
  for (std::size_t i = 0; i < n; ++i) ck.parameters.add(records[i].first, records[i].second);
  if (has_optimizer) {
    OptimizerState s;
    s.step = ck.step;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& m = records[n + i];
      const auto& v = records[2 * n + i];
      if (m.first != kMomentPrefix[0] + ck.parameters.paths()[i] ||
          v.first != kMomentPrefix[1] + ck.parameters.paths()[i]) {
        throw DataError("checkpoint optimizer record " + m.first + " does not match its parameter");
      }
      s.first_moment.push_back(m.second);
      s.second_moment.push_back(v.second);
    }
    ck.optimizer = std::move(s);
  }
  return ck;
}

Checkpoint checkpoint_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  try {
    return checkpoint_read(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Checkpoint make_checkpoint(const Model& model, const TrainConfig& config, const OptimizerState* optimizer,
                           std::size_t epoch, std::size_t total_steps, const std::string& dataset_digest) {
  Checkpoint ck;
  ck.model_config = model.config();
  ck.train_config = config;
  ck.step = optimizer ? optimizer->step : 0;
  ck.epoch = epoch;
  ck.total_steps = total_steps;
  ck.dataset_digest = dataset_digest;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    ck.parameters.add(model.parameters().paths()[i], model.parameters().tensors()[i].clone());
  }
  if (optimizer) {
    OptimizerState copy;
    copy.step = optimizer->step;
    for (const auto& t : optimizer->first_moment) copy.first_moment.push_back(t.clone());
    for (const auto& t : optimizer->second_moment) copy.second_moment.push_back(t.clone());
    ck.optimizer = std::move(copy);
  }
  return ck;
}

Model load_model(const Checkpoint& checkpoint) { return Model(checkpoint.model_config, checkpoint.parameters); }

}  // namespace transip
