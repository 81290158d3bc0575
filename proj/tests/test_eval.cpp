#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "transip/checkpoint.hpp"
#include "transip/errors.hpp"
#include "transip/eval.hpp"
#include "transip/lj_oracle.hpp"

using namespace transip;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  return c;
}

std::vector<LabeledMolecule> dataset(std::size_t count, std::uint64_t seed = 1) {
  GeneratorConfig g;
  g.count = count;
  g.seed = seed;
  return generate_lj_dataset(g);
}

std::vector<Molecule> molecules_of(const std::vector<LabeledMolecule>& records) {
  std::vector<Molecule> out;
  for (const auto& r : records) out.push_back(r.molecule);
  return out;
}

// Backbone blind to coordinates and an identity transformation: f(g m) equals
// T(g, f(m)) for every rotation.
Model equivariant_stub() {
  ModelConfig c = tiny_config();
  c.ttau_layers = 1;
  Model model(c, 3);
  auto& p = model.parameters();
  for (const char* name : {"embed.coord.fc1.weight", "embed.coord.fc1.bias", "embed.coord.fc2.weight",
                           "embed.coord.fc2.bias"}) {
    p.assign(p.index_of(name), Tensor::zeros(p[name].shape()).requires_grad_(true));
  }
  Tensor w = Tensor::zeros({9 + 16, 16});
  for (std::size_t k = 0; k < 16; ++k) w.mutable_values()[(9 + k) * 16 + k] = 1.0;
  p.assign(p.index_of("ttau.fc1.weight"), w.requires_grad_(true));
  return model;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("force_mae") {
  std::vector<Vec3> a{Vec3(1, 0, 0)}, b{Vec3(0, 1, 0)};
  CHECK(force_mae(a, a) == 0.0);
  CHECK(force_mae(a, b) == 2.0 / 3.0);
  CHECK(force_mae(b, a) == force_mae(a, b));
  std::vector<Vec3> two{Vec3::Zero(), Vec3::Zero()};
  CHECK_THROWS_AS(force_mae(a, two), std::invalid_argument);
}

TEST_CASE("force_cosine") {
  std::vector<Vec3> f{Vec3(1, 2, 3), Vec3(-1, 0, 2)};
  std::vector<Vec3> neg{Vec3(-1, -2, -3), Vec3(1, 0, -2)};
  CHECK(force_cosine(f, f) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(force_cosine(f, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  std::vector<Vec3> p{Vec3(1, 0, 0), Vec3(1, 0, 0)}, t{Vec3(2, 0, 0), Vec3(0, 3, 0)};
  CHECK(force_cosine(p, t) == 0.5);
  std::vector<Vec3> z{Vec3::Zero(), Vec3(1, 0, 0)}, u{Vec3(1, 0, 0), Vec3(1, 0, 0)};
  CHECK(force_cosine(z, u) == 0.5);
}

TEST_CASE("energy_metrics") {
  const auto same = energy_metrics(3.0, 3.0, 5);
  CHECK(same.per_atom == 0.0);
  CHECK(same.total == 0.0);
  const auto e = energy_metrics(10.0, 8.0, 4);
  CHECK(e.per_atom == 0.5);
  CHECK(e.total == 2.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-50, 50);
  std::uniform_int_distribution<std::size_t> n(1, 1024);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t atoms = n(rng);
    const auto m = energy_metrics(u(rng), u(rng), atoms);
    CHECK(std::abs(m.per_atom * static_cast<double>(atoms) - m.total) <= 1e-15 * std::max(m.total, 1e-300));
  }
  CHECK_THROWS_AS(energy_metrics(1, 1, 0), std::invalid_argument);
}

TEST_CASE("pairwise_sum") {
  std::vector<double> v(1000, 0.1);
  CHECK(pairwise_sum(v) == doctest::Approx(100.0).epsilon(1e-14));
  CHECK(pairwise_mean(std::vector<double>{}) == 0.0);
}

TEST_CASE("latent probe") {
  auto data = dataset(12, 2);
  const auto mols = molecules_of(data);
  const Model stub = equivariant_stub();
  CHECK(latent_equivariance_probe(stub, mols, 3, 9) == 0.0);

  const Model model(tiny_config(), 4);
  const double packed = latent_equivariance_probe(model, mols, 4, 77, 512);
  const double loose = latent_equivariance_probe(model, mols, 4, 77, 12);
  CHECK(packed > 0.0);
  CHECK(std::abs(packed - loose) < 1e-10);
  CHECK(latent_equivariance_probe(model, mols, 4, 77, 512) == packed);
  CHECK(latent_equivariance_probe(model, mols, 4, 78, 512) != packed);
}

TEST_CASE("output equivariance probe") {
  auto data = dataset(10, 3);
  const auto mols = molecules_of(data);
  const Model model(tiny_config(), 5);
  const auto identity = [](std::size_t, std::size_t) { return Rotation(); };
  const auto none = output_equivariance_probe(model_predictor(model), mols, 2, identity);
  CHECK(none.energy_invariance_error == 0.0);
  CHECK(none.force_equivariance_error == 0.0);

  const auto oracle = output_equivariance_probe(lj_predictor(), mols, 8, kDefaultProbeSeed);
  CHECK(oracle.energy_invariance_error < 1e-9);
  CHECK(oracle.force_equivariance_error < 1e-9);

  const auto untrained = output_equivariance_probe(model_predictor(model), mols);
  CHECK(untrained.energy_invariance_error > 0.0);
  CHECK(untrained.force_equivariance_error > 0.0);
}

TEST_CASE("dataset metrics do not depend on order or packing") {
  auto data = dataset(20, 4);
  const Model model(tiny_config(), 6);
  EvalOptions packed;
  EvalOptions loose;
  loose.batch_max_tokens = 13;
  const auto a = evaluate(model, data, "all", packed);
  const auto b = evaluate(model, data, "all", loose);
  CHECK(a.sample_count == 20);
  CHECK(std::abs(a.force_mae - b.force_mae) < 1e-10);
  CHECK(std::abs(a.force_cosine - b.force_cosine) < 1e-10);
  CHECK(std::abs(a.energy_per_atom_mae - b.energy_per_atom_mae) < 1e-10);
  CHECK(std::abs(a.total_energy_mae - b.total_energy_mae) < 1e-10);
  CHECK(std::abs(a.latent_equiv_error - b.latent_equiv_error) < 1e-10);
  CHECK(a.force_cosine >= -1.0);
  CHECK(a.force_cosine <= 1.0);

  auto reversed = data;
  std::reverse(reversed.begin(), reversed.end());
  EvalOptions no_probe;
  no_probe.rotations = 0;
  const auto c = evaluate(model, data, "all", no_probe);
  const auto d = evaluate(model, reversed, "all", no_probe);
  CHECK(std::abs(c.force_mae - d.force_mae) < 1e-10);
  CHECK(std::abs(c.total_energy_mae - d.total_energy_mae) < 1e-10);
  CHECK(std::abs(c.force_cosine - d.force_cosine) < 1e-10);
}

TEST_CASE("compare_models writes the documented CSV") {
  const fs::path dir = fs::temp_directory_path() / "transip_test_compare";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Model m1(tiny_config(), 1), m2(tiny_config(), 2);
  checkpoint_write(dir / "a.tipc", make_checkpoint(m1, TrainConfig{}, nullptr, 0, 0, ""));
  checkpoint_write(dir / "b.tipc", make_checkpoint(m2, TrainConfig{}, nullptr, 0, 0, ""));
  const std::vector<Category> one{{"all", dataset(6, 5)}};
  EvalOptions options;
  options.rotations = 2;
  compare_models({dir / "a.tipc", dir / "b.tipc"}, one, dir / "out.csv", options);
  const auto lines = read_lines(dir / "out.csv");
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] ==
        "checkpoint,category,n,force_mae,force_cos,energy_atom_mae,energy_total_mae,latent_equiv,"
        "energy_rotinv_err,force_equiv_err");
  for (std::size_t i = 1; i < 3; ++i) CHECK(std::count(lines[i].begin(), lines[i].end(), ',') == 9);

  compare_models({dir / "a.tipc", dir / "a.tipc"}, one, dir / "twice.csv", options);
  const auto twice = read_lines(dir / "twice.csv");
  CHECK(twice[1] == twice[2]);

  const auto categories = categorize(dataset(30, 6));
  CHECK(categories.front().first == "all");
  CHECK(categories.size() == 3);

  std::ofstream(dir / "junk.tipc") << "not a checkpoint";
  CHECK_THROWS_AS(compare_models({dir / "junk.tipc"}, one, dir / "bad.csv", options), DataError);
  fs::remove_all(dir);
}
