#include "transip/run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "transip/errors.hpp"

namespace transip {

namespace {

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& text, const std::string& name) {
  const std::string s = trim(text);
  T value{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw ConfigError("invalid value '" + text + "' for " + name);
  }
  return value;
}

std::string format(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <class T>
std::string format(T v) {
  return std::to_string(v);
}

std::string format_list(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

std::vector<int> parse_list(const std::string& text, const std::string& name) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(item, name));
  if (out.empty()) throw ConfigError(name + " must list at least one value");
  return out;
}

template <class T, class Access>
Field number(std::string section, std::string key, Access access) {
  const std::string name = section + "." + key;
  return {section, key,
          [access, name](RunConfig& c, const std::string& v) { access(c) = parse_number<T>(v, name); },
          [access](const RunConfig& c) { return format(access(const_cast<RunConfig&>(c))); }};
}

template <class Access>
Field text(std::string section, std::string key, Access access) {
  return {section, key, [access](RunConfig& c, const std::string& v) { access(c) = trim(v); },
          [access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)); }};
}

#define FIELD(type, section, key, member) \
  number<type>(section, key, [](RunConfig& c) -> type& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FIELD(std::size_t, "model", "hidden_dim", model.hidden_dim),
      FIELD(std::size_t, "model", "num_layers", model.num_layers),
      FIELD(std::size_t, "model", "num_heads", model.num_heads),
      FIELD(std::size_t, "model", "context_length", model.context_length),
      FIELD(double, "model", "projection_dropout", model.projection_dropout),
      FIELD(double, "model", "attention_dropout", model.attention_dropout),
      FIELD(std::size_t, "model", "feedforward_multiplier", model.feedforward_multiplier),
      FIELD(int, "model", "charge_vocab_range", model.charge_vocab_range),
      FIELD(int, "model", "spin_vocab_range", model.spin_vocab_range),
      FIELD(std::size_t, "model", "ttau_layers", model.ttau_layers),
      FIELD(std::size_t, "model", "ttau_hidden_multiplier", model.ttau_hidden_multiplier),

      FIELD(double, "train", "learning_rate", train.learning_rate),
      FIELD(double, "train", "weight_decay", train.weight_decay),
      FIELD(double, "train", "grad_clip_norm", train.grad_clip_norm),
      FIELD(double, "train", "warmup_fraction", train.warmup_fraction),
      FIELD(double, "train", "min_lr_factor", train.min_lr_factor),
      FIELD(double, "train", "beta1", train.beta1),
      FIELD(double, "train", "beta2", train.beta2),
      FIELD(double, "train", "adam_epsilon", train.adam_epsilon),
      FIELD(std::size_t, "train", "epochs", train.epochs),
      FIELD(std::size_t, "train", "batch_max_tokens", train.batch_max_tokens),
      FIELD(double, "train", "validation_fraction", train.validation_fraction),
      FIELD(std::uint64_t, "train", "seed", train.seed),
      {"train", "mode", [](RunConfig& c, const std::string& v) { c.train.mode = parse_train_mode(trim(v)); },
       [](const RunConfig& c) { return to_string(c.train.mode); }},
      FIELD(double, "train", "lambda_E", train.weights.lambda_E),
      FIELD(double, "train", "lambda_F", train.weights.lambda_F),
      FIELD(double, "train", "lambda_leq", train.weights.lambda_leq),

      text("data", "path", [](RunConfig& c) -> std::string& { return c.data.path; }),
      text("data", "eval_path", [](RunConfig& c) -> std::string& { return c.data.eval_path; }),
      FIELD(std::size_t, "data", "count", data.generator.count),
      FIELD(std::size_t, "data", "atoms_min", data.generator.atoms_min),
      FIELD(std::size_t, "data", "atoms_max", data.generator.atoms_max),
      {"data", "palette",
       [](RunConfig& c, const std::string& v) { c.data.generator.element_palette = parse_list(v, "data.palette"); },
       [](const RunConfig& c) { return format_list(c.data.generator.element_palette); }},
      FIELD(std::uint64_t, "data", "seed", data.generator.seed),

      FIELD(std::size_t, "probe", "rotations", probe.rotations),
      FIELD(std::uint64_t, "probe", "seed", probe.seed),

      text("output", "dir", [](RunConfig& c) -> std::string& { return c.out_dir; }),
  };
  return table;
}

#undef FIELD

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.generator.atoms_min < 2) throw ConfigError("data.atoms_min must be at least 2");
  if (data.generator.atoms_max < data.generator.atoms_min) throw ConfigError("data.atoms_max < data.atoms_min");
  if (data.generator.atoms_max > model.context_length) {
    throw ConfigError("data.atoms_max exceeds model.context_length");
  }
  for (int z : data.generator.element_palette) {
    if (!LjTable::standard().contains(z)) {
      throw ConfigError("data.palette entry " + std::to_string(z) + " has no Lennard-Jones parameters");
    }
  }
  if (probe.rotations == 0) throw ConfigError("probe.rotations must be positive");
}

void set_value(RunConfig& config, const std::string& section, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key " + section + "." + key);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set_value(config, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
            assignment.substr(eq + 1));
}

RunConfig parse_run_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig config;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) set_value(config, section, key, value.data());
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return parse_run_config(in);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_ini(const RunConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << "[" << f.section << "]\n";
      section = f.section;
    }
    out << f.key << " = " << f.get(config) << "\n";
  }
  return out.str();
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.section + "." + f.key);
  return keys;
}

}  // namespace transip
