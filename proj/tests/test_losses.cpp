#include <cmath>

#include "doctest.h"
#include "transip/batch.hpp"
#include "transip/lj_oracle.hpp"
#include "transip/losses.hpp"
#include "transip/ops.hpp"
#include "transip/random.hpp"

using namespace transip;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  return c;
}

std::vector<LabeledMolecule> small_dataset(std::size_t count, std::uint64_t seed) {
  GeneratorConfig g;
  g.count = count;
  g.seed = seed;
  g.atoms_max = 6;
  return generate_lj_dataset(g);
}

std::vector<Tensor> parameter_gradients(const Batch& batch, const Model& model, const LossWeights& w,
                                        std::uint64_t rotation_seed) {
  std::mt19937_64 rng(rotation_seed);
  auto loss = total_loss(batch, model, w, rng);
  return grad(loss.total, model.parameters().tensors());
}

}  // namespace

TEST_CASE("energy_loss") {
  CHECK(energy_loss(3.0, 3.0, 2) == 0.0);
  CHECK(energy_loss(10.0, 8.0, 4) == 0.5);
  CHECK(energy_loss(-10.0, -8.0, 4) == 0.5);
  CHECK_THROWS_AS(energy_loss(1.0, 0.0, 0), std::invalid_argument);
}

TEST_CASE("force_loss") {
  std::vector<Vec3> a{Vec3(1, 0, 0)}, zero{Vec3::Zero()};
  CHECK(force_loss(a, a) == 0.0);
  CHECK(force_loss(a, zero) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  std::vector<Vec3> two{Vec3::Zero(), Vec3::Zero()};
  CHECK_THROWS_AS(force_loss(a, two), std::invalid_argument);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec3> p, t;
    for (int i = 0; i < 5; ++i) {
      p.emplace_back(normal(rng), normal(rng), normal(rng));
      t.emplace_back(normal(rng), normal(rng), normal(rng));
    }
    const Rotation g = sample_rotation_uniform(rng);
    std::vector<Vec3> pr, tr;
    for (int i = 0; i < 5; ++i) {
      pr.push_back(g.apply(p[i]));
      tr.push_back(g.apply(t[i]));
    }
    CHECK(std::abs(force_loss(pr, tr) - force_loss(p, t)) < 1e-10);
    CHECK(force_loss(p, t) >= 0.0);
  }
}

TEST_CASE("tensor losses agree with the scalar forms") {
  auto data = small_dataset(4, 1);
  Batch b = collate(data);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  std::vector<double> e(b.batch_size), f(b.forces.size(), 0.0);
  for (auto& v : e) v = normal(rng);
  for (std::size_t row = 0; row < b.batch_size; ++row) {
    for (std::size_t i = 0; i < b.atom_counts[row] * 3; ++i) f[row * b.max_atoms * 3 + i] = normal(rng);
  }
  const auto le = energy_loss(Tensor({b.batch_size}, e), b).to_vector();
  const auto lf = force_loss(Tensor({b.batch_size, b.max_atoms, 3}, f), b).to_vector();
  for (std::size_t row = 0; row < b.batch_size; ++row) {
    CHECK(le[row] == doctest::Approx(energy_loss(e[row], data[row].energy, data[row].size())).epsilon(1e-14));
    std::vector<Vec3> pred;
    for (std::size_t i = 0; i < data[row].size(); ++i) {
      const double* r = f.data() + (row * b.max_atoms + i) * 3;
      pred.emplace_back(r[0], r[1], r[2]);
    }
    CHECK(lf[row] == doctest::Approx(force_loss(pred, data[row].forces)).epsilon(1e-14));
  }
}

TEST_CASE("latent_equivariance_loss with stub embeddings") {
  Molecule m;
  m.positions = {Vec3::Zero()};
  m.atomic_numbers = {1};
  Batch b = collate(std::span(&m, 1));
  Tensor rotated({1, 1, 4}, {1.0, -2.0, 0.5, 3.0});
  Tensor transformed({1, 1, 4}, {0.0, -1.0, 0.5, 1.0});
  // (1 + 1 + 0 + 4) / (1 * 4)
  CHECK(latent_equivariance_loss(rotated, transformed, b).item() == 1.5);
  CHECK(latent_equivariance_loss(rotated, rotated, b).item() == 0.0);

  Model model(tiny_config(), 2);
  auto data = small_dataset(3, 2);
  Batch batch = collate(data);
  std::mt19937_64 rng(4);
  std::vector<Rotation> gs;
  for (std::size_t i = 0; i < batch.batch_size; ++i) gs.push_back(sample_rotation_uniform(rng));
  NoGradGuard off;
  Tensor h = forward_embed(batch, coordinate_tensor(batch), model);
  const auto values = latent_equivariance_loss(gs, h, batch, model).to_vector();
  for (double v : values) CHECK(v > 0.0);
  const Batch rotated_batch = rotate_batch(batch, gs);
  Tensor target = forward_embed(rotated_batch, coordinate_tensor(rotated_batch), model);
  for (double v : latent_equivariance_loss(target, target, batch).to_vector()) CHECK(v == 0.0);
}

TEST_CASE("total_loss combines the weighted terms") {
  Model model(tiny_config(), 3);
  auto data = small_dataset(5, 3);
  Batch b = collate(data);

  std::mt19937_64 rng(1);
  auto zero = total_loss(b, model, {0, 0, 0}, rng);
  CHECK(zero.total.item() == 0.0);

  std::mt19937_64 r1(7), r2(7);
  auto parts = total_loss(b, model, {1, 1, 1}, r1);
  auto weighted = total_loss(b, model, {5, 15, 5}, r2);
  CHECK(parts.energy >= 0.0);
  CHECK(parts.force >= 0.0);
  CHECK(parts.latent > 0.0);
  CHECK(weighted.total.item() ==
        doctest::Approx(5 * parts.energy + 15 * parts.force + 5 * parts.latent).epsilon(1e-13));

  for (double scale : {0.5, 1.0, 3.0}) {
    std::mt19937_64 r(7);
    auto l = total_loss(b, model, {5, 15 * scale, 5}, r);
    CHECK(l.total.item() == doctest::Approx(5 * parts.energy + 15 * scale * parts.force + 5 * parts.latent).epsilon(1e-13));
  }

  // Labels set to the model's own energies: a perfect-energy batch.
  Batch perfect = b;
  const Prediction p = predict(b, model, false);
  for (std::size_t i = 0; i < b.batch_size; ++i) perfect.energies[i] = p.energy.values()[i];
  std::mt19937_64 r3(7);
  CHECK(total_loss(perfect, model, {1, 0, 0}, r3).total.item() == 0.0);
}

TEST_CASE("gradient of the objective is linear in the weights") {
  Model model(tiny_config(), 4);
  auto data = small_dataset(4, 4);
  Batch b = collate(data);
  const auto g = parameter_gradients(b, model, {5, 15, 5}, 11);
  const auto g2 = parameter_gradients(b, model, {10, 30, 10}, 11);
  const auto ge = parameter_gradients(b, model, {1, 0, 0}, 11);
  const auto gf = parameter_gradients(b, model, {0, 1, 0}, 11);
  const auto gl = parameter_gradients(b, model, {0, 0, 1}, 11);
  double worst = 0.0;
  bool doubled = true;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const auto a = g[k].values(), a2 = g2[k].values(), e = ge[k].values(), f = gf[k].values(), l = gl[k].values();
    for (std::size_t i = 0; i < a.size(); ++i) {
      worst = std::max(worst, std::abs(a[i] - (5 * e[i] + 15 * f[i] + 5 * l[i])));
      doubled = doubled && a2[i] == 2.0 * a[i];
    }
  }
  CHECK(worst < 1e-10);
  CHECK(doubled);
}

TEST_CASE("every parameter receives gradient") {
  Model model(tiny_config(), 5);
  auto data = small_dataset(16, 5);
  Batch b = collate(data);
  const auto grads = parameter_gradients(b, model, {5, 15, 5}, 3);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    double magnitude = 0.0;
    for (double v : grads[k].values()) magnitude += std::abs(v);
    INFO(model.parameters().paths()[k]);
    CHECK(magnitude > 0.0);
  }
}

TEST_CASE("without the latent term no rotations are drawn") {
  Model model(tiny_config(), 6);
  auto data = small_dataset(4, 6);
  Batch b = collate(data);
  std::mt19937_64 rng(9);
  const auto before = rng;
  auto l = total_loss(b, model, {5, 15, 0}, rng);
  CHECK(rng == before);
  CHECK(l.latent == 0.0);

  GradModeGuard on(true);
  const Prediction p = predict(b, model, true);
  Tensor plain = ops::mean_all(ops::add(ops::scale(energy_loss(p.energy, b), 5.0),
                                        ops::scale(force_loss(p.forces, b), 15.0)));
  CHECK(plain.item() == l.total.item());
  const auto g1 = grad(plain, model.parameters().tensors());
  const auto g2 = grad(l.total, model.parameters().tensors());
  for (std::size_t k = 0; k < g1.size(); ++k) CHECK(g1[k].to_vector() == g2[k].to_vector());
}
