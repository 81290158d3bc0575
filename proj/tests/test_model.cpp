#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gradcheck.hpp"
#include "transip/batch.hpp"
#include "transip/errors.hpp"
#include "transip/model.hpp"
#include "transip/ops.hpp"
#include "transip/random.hpp"

using namespace transip;
using transip::testing::relative_error;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  return c;
}

Molecule random_molecule(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::uniform_int_distribution<int> pick(0, 3);
  const int elements[] = {1, 6, 7, 8};
  Molecule m;
  for (std::size_t i = 0; i < n; ++i) {
    m.positions.emplace_back(u(rng), u(rng), u(rng));
    m.atomic_numbers.push_back(elements[pick(rng)]);
  }
  m.charge = static_cast<int>(n % 3) - 1;
  m.spin = 1 + static_cast<int>(n % 2);
  return m;
}

double energy_of(const Batch& b, const Model& model) {
  NoGradGuard off;
  return aggregate_energy(forward_embed(b, coordinate_tensor(b), model), b, model).values()[0];
}

// The model after a few random perturbations so outputs are not dominated by
// the tiny initial head.
Model perturbed_model(std::uint64_t seed) {
  Model model(tiny_config(), seed);
  auto rng = make_rng(seed, Stream::kInit, 999);
  std::normal_distribution<double> normal(0.0, 0.3);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    Tensor t = model.parameters().tensors()[i].clone();
    for (auto& v : t.mutable_values()) v += normal(rng);
    model.parameters().assign(i, t.requires_grad_(true));
  }
  return model;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.hidden_dim == 384);
  CHECK(c.num_layers == 8);
  CHECK(c.num_heads == 6);
  c.num_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.hidden_dim = 12;
  c.num_heads = 4;  // head dim 3 is odd
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameter count is deterministic and every tensor is named") {
  const auto a = parameter_layout(tiny_config());
  const auto b = init_parameters(tiny_config(), 7);
  CHECK(a.count() == b.count());
  CHECK(a.paths() == b.paths());
  const auto c = init_parameters(tiny_config(), 7);
  for (std::size_t i = 0; i < b.size(); ++i) {
    CHECK(std::vector<double>(b.tensors()[i].values().begin(), b.tensors()[i].values().end()) ==
          c.tensors()[i].to_vector());
  }
  CHECK(b["final_norm.gain"].values()[0] == 1.0);
  CHECK(b["energy.fc1.bias"].values()[0] == 0.0);
  for (double w : b["layers.0.attn.query.weight"].values()) CHECK(std::abs(w) <= 0.04);
}

TEST_CASE("model rejects parameters with the wrong shape") {
  auto params = init_parameters(tiny_config(), 1);
  ModelConfig wider = tiny_config();
  wider.hidden_dim = 32;
  try {
    Model m(wider, params);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("(119, 8)") != std::string::npos);
    CHECK(std::string(e.what()).find("(119, 16)") != std::string::npos);
  }
}

TEST_CASE("embed_tokens") {
  SUBCASE("width d under the default config") {
    Model model(ModelConfig{}, 3);
    Molecule m;
    m.positions = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
    m.atomic_numbers = {1, 8};
    Batch b = collate(std::span(&m, 1));
    Tensor t = embed_tokens(b, coordinate_tensor(b), model);
    CHECK(t.shape() == Shape{1, 2, 384});
  }
  Model model(tiny_config(), 3);
  Molecule a;
  a.positions = {Vec3(0.5, 0, 0), Vec3(0.5, 0, 0), Vec3(-1, 0, 0)};
  a.atomic_numbers = {6, 6, 1};
  Molecule small;
  small.positions = {Vec3(0, 0, 0)};
  small.atomic_numbers = {8};
  std::vector<Molecule> mols{a, small};
  Batch b = collate(mols);
  Tensor t = embed_tokens(b, coordinate_tensor(b), model);
  const auto v = t.values();
  const std::size_t d = 16;
  for (std::size_t k = 0; k < d; ++k) CHECK(v[0 * d + k] == v[1 * d + k]);
  for (std::size_t i = 1; i < 3; ++i) {
    for (std::size_t k = 0; k < d; ++k) CHECK(v[(3 + i) * d + k] == 0.0);
  }
  b.atomic_numbers[0] = 200;
  CHECK_THROWS_AS(embed_tokens(b, coordinate_tensor(b), model), std::invalid_argument);
}

TEST_CASE("global_bias") {
  Model model(tiny_config(), 5);
  Tensor c = global_bias(1, 2, model);
  CHECK(c.shape() == Shape{16});
  CHECK(c.to_vector() == global_bias(1, 2, model).to_vector());
  CHECK(c.to_vector() != global_bias(0, 2, model).to_vector());
  CHECK_THROWS_AS(global_bias(11, 1, model), std::invalid_argument);
  CHECK_THROWS_AS(global_bias(0, 0, model), std::invalid_argument);

  std::mt19937_64 rng(2);
  Molecule m1 = random_molecule(rng, 3), m2 = random_molecule(rng, 7);
  m1.charge = m2.charge = 1;
  m1.spin = m2.spin = 2;
  std::vector<Molecule> mols{m1, m2};
  Batch b = collate(mols);
  const auto rows = global_bias(b, model).to_vector();
  const auto single = c.to_vector();
  for (std::size_t k = 0; k < 16; ++k) {
    CHECK(rows[k] == doctest::Approx(single[k]).epsilon(1e-15));
    CHECK(rows[16 + k] == rows[k]);
  }
}

TEST_CASE("rope_apply") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  std::vector<double> x(8), y(8);
  for (auto& v : x) v = normal(rng);
  for (auto& v : y) v = normal(rng);
  CHECK(rope_apply(x, 0) == x);
  auto norm = [](const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); };
  for (std::size_t pos : {1u, 5u, 100u, 1023u}) CHECK(std::abs(norm(rope_apply(x, pos)) - norm(x)) < 1e-12);
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  };
  for (std::size_t delta = 0; delta < 6; ++delta) {
    const double ref = dot(rope_apply(x, delta), rope_apply(y, 0));
    for (std::size_t shift = 1; shift < 50; shift += 7) {
      CHECK(std::abs(dot(rope_apply(x, shift + delta), rope_apply(y, shift)) - ref) < 1e-10);
    }
  }
  std::vector<double> odd(3, 1.0);
  CHECK_THROWS_AS(rope_apply(odd, 1), std::invalid_argument);

  Tensor rows = Tensor::zeros({4, 8});
  for (std::size_t p = 0; p < 4; ++p) std::copy(x.begin(), x.end(), rows.mutable_values().begin() + p * 8);
  const auto encoded = ops::rope(rows).to_vector();
  for (std::size_t p = 0; p < 4; ++p) {
    const auto expect = rope_apply(x, p);
    for (std::size_t k = 0; k < 8; ++k) CHECK(encoded[p * 8 + k] == doctest::Approx(expect[k]).epsilon(1e-14));
  }
}

TEST_CASE("attention_layer ignores padded tokens") {
  Model model = perturbed_model(4);
  std::mt19937_64 rng(4);
  std::vector<Molecule> mols{random_molecule(rng, 3), random_molecule(rng, 6)};
  Batch b = collate(mols);
  NoGradGuard off;
  Tensor tokens = transip::testing::random_tensor({2, 6, 16}, rng);
  Tensor garbage = tokens.clone();
  auto g = garbage.mutable_values();
  for (std::size_t i = 3; i < 6; ++i) {
    for (std::size_t k = 0; k < 16; ++k) g[i * 16 + k] = 1e3 * static_cast<double>(k + i);
  }
  const Tensor mask = attention_mask_tensor(b);
  Tensor out = attention_layer(tokens, mask, model, 0);
  Tensor out_garbage = attention_layer(garbage, mask, model, 0);
  CHECK(out.shape() == tokens.shape());
  const auto a = out.values(), c = out_garbage.values();
  for (std::size_t i = 0; i < 3 * 16; ++i) CHECK(std::abs(a[i] - c[i]) < 1e-10);
  for (std::size_t i = 6 * 16; i < 12 * 16; ++i) CHECK(std::abs(a[i] - c[i]) < 1e-10);
}

TEST_CASE("molecules batched together match separate evaluation") {
  Model model = perturbed_model(5);
  std::mt19937_64 rng(5);
  std::vector<Molecule> mols{random_molecule(rng, 4), random_molecule(rng, 9), random_molecule(rng, 2)};
  Batch together = collate(mols);
  const Prediction joint = predict(together, model, false);
  for (std::size_t row = 0; row < mols.size(); ++row) {
    Batch alone = collate(std::span(&mols[row], 1));
    const Prediction single = predict(alone, model, false);
    CHECK(std::abs(single.energy.values()[0] - joint.energy.values()[row]) < 1e-10);
    const auto h1 = embedding_rows(joint.embeddings, together, row);
    const auto h2 = embedding_rows(single.embeddings, alone, 0);
    REQUIRE(h1.size() == h2.size());
    for (std::size_t k = 0; k < h1.size(); ++k) CHECK(std::abs(h1[k] - h2[k]) < 1e-10);
  }
}

TEST_CASE("forward_embed is exactly translation invariant") {
  Model model = perturbed_model(6);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> grid(-64, 64);
  for (int trial = 0; trial < 10; ++trial) {
    Molecule m = random_molecule(rng, 5);
    for (auto& p : m.positions) p = Vec3(grid(rng), grid(rng), grid(rng)) / 32.0;
    Molecule moved = m;
    const Vec3 t = Vec3(grid(rng), grid(rng), grid(rng)) / 8.0;
    for (auto& p : moved.positions) p += t;
    Batch b1 = collate(std::span(&m, 1)), b2 = collate(std::span(&moved, 1));
    const Prediction p1 = predict(b1, model, false), p2 = predict(b2, model, false);
    CHECK(p1.embeddings.to_vector() == p2.embeddings.to_vector());
    CHECK(p1.energy.item() == p2.energy.item());
    CHECK(p1.forces.to_vector() == p2.forces.to_vector());
  }
}

TEST_CASE("aggregate_energy uses a symmetric mean") {
  Model model = perturbed_model(7);
  std::mt19937_64 rng(7);
  Molecule m = random_molecule(rng, 4);
  Batch b = collate(std::span(&m, 1));
  std::uniform_int_distribution<int> grid(-16, 16);
  std::vector<double> rows(4 * 16);
  for (auto& v : rows) v = grid(rng) / 8.0;
  NoGradGuard off;
  const double e = aggregate_energy(Tensor({1, 4, 16}, rows), b, model).item();
  CHECK(std::isfinite(e));
  std::vector<double> permuted(rows.size());
  const std::size_t order[] = {2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(rows.begin() + order[i] * 16, 16, permuted.begin() + i * 16);
  CHECK(aggregate_energy(Tensor({1, 4, 16}, permuted), b, model).item() == e);

  Molecule doubled = m;
  for (int k = 0; k < 4; ++k) {
    doubled.positions.push_back(m.positions[k]);
    doubled.atomic_numbers.push_back(m.atomic_numbers[k]);
  }
  Batch b2 = collate(std::span(&doubled, 1));
  std::vector<double> twice = rows;
  twice.insert(twice.end(), rows.begin(), rows.end());
  CHECK(aggregate_energy(Tensor({1, 8, 16}, twice), b2, model).item() == doctest::Approx(e).epsilon(1e-14));
}

TEST_CASE("forces match finite differences of the energy") {
  Model model = perturbed_model(8);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Molecule m = random_molecule(rng, 3 + static_cast<std::size_t>(trial) * 2);
    Batch b = collate(std::span(&m, 1));
    const Prediction p = predict(b, model, false);
    CHECK(p.forces.shape() == Shape{1, m.size(), 3});
    double worst = 0.0;
    for (std::size_t i = 0; i < b.coordinates.size(); ++i) {
      const double saved = b.coordinates[i];
      b.coordinates[i] = saved + 1e-4;
      const double up = energy_of(b, model);
      b.coordinates[i] = saved - 1e-4;
      const double down = energy_of(b, model);
      b.coordinates[i] = saved;
      worst = std::max(worst, relative_error(-p.forces.values()[i], (up - down) / 2e-4));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("forces are conservative around a closed loop") {
  Model model = perturbed_model(9);
  std::mt19937_64 rng(9);
  Molecule m = random_molecule(rng, 5);
  Batch b = collate(std::span(&m, 1));
  const Vec3 origin(b.coordinates[3], b.coordinates[4], b.coordinates[5]);
  const Vec3 corners[] = {origin, origin + Vec3(0.3, 0.0, 0.1), origin + Vec3(0.0, 0.25, -0.2)};
  auto force_at = [&](const Vec3& r) {
    for (int c = 0; c < 3; ++c) b.coordinates[3 + c] = r[c];
    const auto f = predict(b, model, false).forces.values();
    return Vec3(f[3], f[4], f[5]);
  };
  const int steps = 100;  // per edge, Simpson's rule
  double work = 0.0;
  for (int e = 0; e < 3; ++e) {
    const Vec3 a = corners[e], c = corners[(e + 1) % 3];
    const double h = 1.0 / steps;
    for (int s = 0; s < steps; s += 2) {
      const Vec3 r0 = a + (c - a) * (s * h), r1 = a + (c - a) * ((s + 1) * h), r2 = a + (c - a) * ((s + 2) * h);
      work += h / 3.0 * (force_at(r0) + 4.0 * force_at(r1) + force_at(r2)).dot(c - a);
    }
  }
  CHECK(std::abs(work) < 1e-6);
}

TEST_CASE("forces sum to zero over each molecule") {
  Model model = perturbed_model(10);
  std::mt19937_64 rng(10);
  std::vector<Molecule> mols{random_molecule(rng, 6), random_molecule(rng, 3)};
  Batch b = collate(mols);
  for (const auto& p : predict_molecules(b, model)) {
    Vec3 total = Vec3::Zero();
    for (const auto& f : p.forces) total += f;
    CHECK(total.norm() < 1e-12);
  }
}

TEST_CASE("transform_latent acts row-wise") {
  Model model = perturbed_model(11);
  std::mt19937_64 rng(11);
  Molecule m = random_molecule(rng, 4);
  Batch b = collate(std::span(&m, 1));
  NoGradGuard off;
  Tensor h = transip::testing::random_tensor({1, 4, 16}, rng);
  const Rotation g = sample_rotation_uniform(rng);
  const auto out = transform_latent(std::span(&g, 1), h, b, model).to_vector();
  CHECK(out.size() == 4 * 16);
  const std::size_t order[] = {3, 1, 0, 2};
  std::vector<double> permuted(64);
  for (std::size_t i = 0; i < 4; ++i) std::copy_n(h.values().begin() + order[i] * 16, 16, permuted.begin() + i * 16);
  const auto out_p = transform_latent(std::span(&g, 1), Tensor({1, 4, 16}, permuted), b, model).to_vector();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 16; ++k) CHECK(out_p[i * 16 + k] == out[order[i] * 16 + k]);
  }
  const Rotation identity;
  Model fresh(tiny_config(), 1);
  const auto at_init = transform_latent(std::span(&identity, 1), h, b, fresh).to_vector();
  double diff = 0.0;
  for (std::size_t i = 0; i < 64; ++i) diff += std::abs(at_init[i] - h.values()[i]);
  CHECK(diff > 1e-3);
}
