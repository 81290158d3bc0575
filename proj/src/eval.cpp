#include "transip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "transip/batch.hpp"
#include "transip/checkpoint.hpp"
#include "transip/errors.hpp"
#include "transip/lj_oracle.hpp"
#include "transip/losses.hpp"
#include "transip/random.hpp"

namespace transip {

namespace {

void require_same_size(std::size_t a, std::size_t b) {
  if (a != b) {
    throw std::invalid_argument("force arrays differ in shape: " + std::to_string(a) + "x3 vs " +
                                std::to_string(b) + "x3");
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<Molecule> molecules_of(std::span<const LabeledMolecule> records) {
  std::vector<Molecule> out;
  for (const auto& r : records) out.push_back(r.molecule);
  return out;
}

}  // namespace

double force_mae(std::span<const Vec3> predicted, std::span<const Vec3> truth) {
  require_same_size(predicted.size(), truth.size());
  if (predicted.empty()) throw std::invalid_argument("force_mae of an empty molecule");
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) total += (predicted[i] - truth[i]).cwiseAbs().sum();
  return total / (3.0 * static_cast<double>(predicted.size()));
}

double force_cosine(std::span<const Vec3> predicted, std::span<const Vec3> truth) {
  require_same_size(predicted.size(), truth.size());
  if (predicted.empty()) throw std::invalid_argument("force_cosine of an empty molecule");
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double norms = predicted[i].norm() * truth[i].norm();
    if (norms > 0.0) total += std::clamp(predicted[i].dot(truth[i]) / norms, -1.0, 1.0);
  }
  return total / static_cast<double>(predicted.size());
}

EnergyErrors energy_metrics(double predicted, double truth, std::size_t atom_count) {
  if (atom_count == 0) throw std::invalid_argument("energy_metrics needs at least one atom");
  const double total = std::abs(predicted - truth);
  return {total / static_cast<double>(atom_count), total};
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double pairwise_mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return pairwise_sum(values) / static_cast<double>(values.size());
}

Predictor model_predictor(const Model& model, std::size_t batch_max_tokens) {
  return [&model, batch_max_tokens](std::span<const Molecule> molecules) {
    std::vector<std::size_t> sizes;
    for (const auto& m : molecules) sizes.push_back(m.size());
    std::vector<MoleculePrediction> out(molecules.size());
    for (const auto& group : plan_batches(sizes, batch_max_tokens)) {
      std::vector<Molecule> members;
      for (auto i : group) members.push_back(molecules[i]);
      const auto predictions = predict_molecules(collate(members), model);
      for (std::size_t j = 0; j < group.size(); ++j) out[group[j]] = predictions[j];
    }
    return out;
  };
}

Predictor lj_predictor() {
  return [](std::span<const Molecule> molecules) {
    std::vector<MoleculePrediction> out;
    for (const auto& m : molecules) {
      auto ef = lj_energy_forces(m, LjTable::standard());
      out.push_back({ef.energy, std::move(ef.forces)});
    }
    return out;
  };
}

Rotation probe_rotation(std::uint64_t seed, std::size_t molecule, std::size_t k) {
  std::mt19937_64 rng(derive_seed(derive_seed(seed, Stream::kProbe, molecule), Stream::kProbe, k));
  return sample_rotation_uniform(rng);
}

RotationSource seeded_rotations(std::uint64_t seed) {
  return [seed](std::size_t molecule, std::size_t k) { return probe_rotation(seed, molecule, k); };
}

double latent_equivariance_probe(const Model& model, std::span<const Molecule> molecules,
                                 std::size_t rotations_per_molecule, std::uint64_t seed,
                                 std::size_t batch_max_tokens) {
  return latent_equivariance_probe(model, molecules, rotations_per_molecule, seeded_rotations(seed),
                                   batch_max_tokens);
}

double latent_equivariance_probe(const Model& model, std::span<const Molecule> molecules,
                                 std::size_t rotations_per_molecule, const RotationSource& source,
                                 std::size_t batch_max_tokens) {
  NoGradGuard off;
  const std::size_t K = rotations_per_molecule;
  std::vector<double> values(molecules.size() * K, 0.0);
  std::vector<std::size_t> sizes;
  for (const auto& m : molecules) sizes.push_back(m.size());
  for (const auto& group : plan_batches(sizes, batch_max_tokens)) {
    std::vector<Molecule> members;
    for (auto i : group) members.push_back(molecules[i]);
    const Batch batch = collate(members);
    const Tensor h = forward_embed(batch, coordinate_tensor(batch), model);
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<Rotation> rotations;
      for (auto i : group) rotations.push_back(source(i, k));
      const auto loss = latent_equivariance_loss(rotations, h, batch, model).to_vector();
      for (std::size_t j = 0; j < group.size(); ++j) values[group[j] * K + k] = loss[j];
    }
  }
  return pairwise_mean(values);
}

OutputEquivariance output_equivariance_probe(const Predictor& predictor, std::span<const Molecule> molecules,
                                             std::size_t rotations_per_molecule, std::uint64_t seed) {
  return output_equivariance_probe(predictor, molecules, rotations_per_molecule, seeded_rotations(seed));
}

OutputEquivariance output_equivariance_probe(const Predictor& predictor, std::span<const Molecule> molecules,
                                             std::size_t rotations_per_molecule, const RotationSource& source) {
  const std::size_t K = rotations_per_molecule;
  const auto base = predictor(molecules);
  std::vector<double> energy_errors(molecules.size() * K), force_errors(molecules.size() * K);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<Rotation> rotations;
    std::vector<Molecule> rotated;
    for (std::size_t i = 0; i < molecules.size(); ++i) {
      rotations.push_back(source(i, k));
      rotated.push_back(apply_rotation(rotations.back(), molecules[i]));
    }
    const auto moved = predictor(rotated);
    for (std::size_t i = 0; i < molecules.size(); ++i) {
      energy_errors[i * K + k] = std::abs(moved[i].energy - base[i].energy);
      std::vector<Vec3> expected;
      for (const auto& f : base[i].forces) expected.push_back(rotations[i].apply(f));
      force_errors[i * K + k] = force_mae(moved[i].forces, expected);
    }
  }
  return {pairwise_mean(energy_errors), pairwise_mean(force_errors)};
}

MetricReport evaluate(const Model& model, std::span<const LabeledMolecule> records, const std::string& category,
                      const EvalOptions& options) {
  MetricReport report;
  report.category_tag = category;
  report.sample_count = records.size();
  if (records.empty()) return report;
  const auto molecules = molecules_of(records);
  const Predictor predictor = model_predictor(model, options.batch_max_tokens);
  const auto predictions = predictor(molecules);
  std::vector<double> fmae, fcos, eatom, etotal;
  for (std::size_t i = 0; i < records.size(); ++i) {
    fmae.push_back(force_mae(predictions[i].forces, records[i].forces));
    fcos.push_back(force_cosine(predictions[i].forces, records[i].forces));
    const auto e = energy_metrics(predictions[i].energy, records[i].energy, records[i].size());
    eatom.push_back(e.per_atom);
    etotal.push_back(e.total);
  }
  report.force_mae = pairwise_mean(fmae);
  report.force_cosine = pairwise_mean(fcos);
  report.energy_per_atom_mae = pairwise_mean(eatom);
  report.total_energy_mae = pairwise_mean(etotal);
  report.latent_equiv_error =
      latent_equivariance_probe(model, molecules, options.rotations, options.seed, options.batch_max_tokens);
  const auto out = output_equivariance_probe(predictor, molecules, options.rotations, options.seed);
  report.energy_rotation_invariance_error = out.energy_invariance_error;
  report.force_rotation_equivariance_error = out.force_equivariance_error;
  return report;
}

std::vector<Category> categorize(std::span<const LabeledMolecule> records) {
  std::vector<LabeledMolecule> small, large;
  for (const auto& r : records) (r.size() <= 6 ? small : large).push_back(r);
  std::vector<Category> out;
  out.emplace_back("all", std::vector<LabeledMolecule>(records.begin(), records.end()));
  if (!small.empty()) out.emplace_back("small", std::move(small));
  if (!large.empty()) out.emplace_back("large", std::move(large));
  return out;
}

const std::vector<std::string> kMetricCsvColumns{
    "checkpoint",     "category",         "n",           "force_mae",         "force_cos",
    "energy_atom_mae", "energy_total_mae", "latent_equiv", "energy_rotinv_err", "force_equiv_err"};

void write_metric_csv_header(std::ostream& out) {
  for (std::size_t i = 0; i < kMetricCsvColumns.size(); ++i) out << (i ? "," : "") << kMetricCsvColumns[i];
  out << "\n";
}

void write_metric_csv_row(std::ostream& out, const std::string& checkpoint, const MetricReport& r) {
  out << checkpoint << "," << r.category_tag << "," << r.sample_count << "," << format_double(r.force_mae) << ","
      << format_double(r.force_cosine) << "," << format_double(r.energy_per_atom_mae) << ","
      << format_double(r.total_energy_mae) << "," << format_double(r.latent_equiv_error) << ","
      << format_double(r.energy_rotation_invariance_error) << ","
      << format_double(r.force_rotation_equivariance_error) << "\n";
}

std::vector<MetricReport> compare_models(const std::vector<std::filesystem::path>& checkpoints,
                                         std::span<const Category> categories,
                                         const std::filesystem::path& out_path, const EvalOptions& options) {
  std::ofstream out(out_path);
  if (!out) throw DataError("cannot write " + out_path.string());
  write_metric_csv_header(out);
  std::vector<MetricReport> reports;
  for (const auto& path : checkpoints) {
    const Model model = load_model(checkpoint_read(path));
    for (const auto& [tag, members] : categories) {
      reports.push_back(evaluate(model, members, tag, options));
      write_metric_csv_row(out, path.string(), reports.back());
    }
  }
  return reports;
}

}  // namespace transip
