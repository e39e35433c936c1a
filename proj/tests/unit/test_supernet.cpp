#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "fixtures.hpp"
#include "neas/errors.hpp"
#include "neas/supernet.hpp"

using namespace neas;

namespace {

EnsembleArchitecture make_arch(int k, std::vector<int> shared,
                               std::vector<std::vector<int>> combos) {
  EnsembleArchitecture a;
  a.k = k;
  a.split_point = static_cast<int>(shared.size());
  a.shared_ops = std::move(shared);
  for (auto& c : combos) a.split_combos.push_back(Combination::canonical(c));
  return a;
}

Tensor<double> random_images(int n, int size, Rng& rng) {
  Tensor<double> x(n, 1, size, size);
  for (Eigen::Index i = 0; i < x.storage().size(); ++i) x.storage()[i] = rng.normal();
  return x;
}

Samples<double> random_samples(int n, int classes, Rng& rng, int size = 8) {
  Samples<double> s{random_images(n, size, rng), {}};
  for (int i = 0; i < n; ++i) s.labels.push_back(static_cast<int>(rng.index(classes)));
  return s;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.storage().size() == b.storage().size());
  return (a.storage() - b.storage()).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("skip layer returns its input unchanged") {
  Supernet<double> net(fixture::plan(3, 7), 1);
  Rng rng(2);
  Tensor<double> x(3, 4, 8, 8);
  for (Eigen::Index i = 0; i < x.storage().size(); ++i) x.storage()[i] = rng.normal();
  const auto y = detail::apply_layer<double>(net, 2, 6, x, Mode::eval, nullptr);
  CHECK(max_abs_diff(x, y) == 0.0);
  CHECK_FALSE(net.has_block(2, 6));
}

TEST_CASE("single-path ensemble is the path softmax") {
  Supernet<double> net(fixture::plan(3, 3), 3);
  Rng rng(4);
  const auto x = random_images(5, 8, rng);
  const auto arch = make_arch(1, {0, 2, 1}, {});
  const auto out = forward_ensemble(net, arch, x, Mode::eval);
  REQUIRE(out.probs.size() == 1);
  CHECK(max_abs_diff(out.ensemble, out.probs[0]) == 0.0);
  CHECK(max_abs_diff(out.probs[0], softmax(out.logits[0])) == 0.0);
}

TEST_CASE("ensemble output is the mean of independent path forwards") {
  Supernet<double> net(fixture::plan(4, 3), 5);
  Rng rng(6);
  const auto x = random_images(6, 8, rng);
  const auto arch = make_arch(2, {1, 0}, {{0, 2}, {1, 2}});
  for (Mode mode : {Mode::eval, Mode::train}) {
    const auto out = forward_ensemble(net, arch, x, mode);
    Tensor<double> mean(out.ensemble.shape());
    for (int p = 0; p < 2; ++p) {
      const auto single = forward_ensemble(net, fixture::single_path(arch, p), x, mode);
      CHECK(max_abs_diff(single.probs[0], out.probs[static_cast<std::size_t>(p)]) < 1e-12);
      mean.storage() += single.probs[0].storage() / 2.0;
    }
    CHECK(max_abs_diff(mean, out.ensemble) < 1e-6);
  }
}

TEST_CASE("probability rows sum to one and mirrored paths agree") {
  Supernet<double> net(fixture::plan(3, 4), 7);
  Rng rng(8);
  const auto x = random_images(7, 8, rng);
  for (int k = 1; k <= 3; ++k) {
    std::vector<std::vector<int>> combos(2);
    for (int i = 0; i < k; ++i) {
      combos[0].push_back(i);
      combos[1].push_back(3 - i);
    }
    const auto arch = make_arch(k, {2}, combos);
    const auto out = forward_ensemble(net, arch, x, Mode::eval);
    for (int n = 0; n < x.n(); ++n) {
      double s = 0;
      for (int c = 0; c < out.ensemble.c(); ++c) s += out.ensemble(n, c);
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
    for (int path = 1; path <= k; ++path) {
      const auto homo = forward_ensemble(net, mirror_homogeneous(arch, path), x, Mode::eval);
      for (int p = 1; p < k; ++p) {
        CHECK(max_abs_diff(homo.probs[static_cast<std::size_t>(p)], homo.probs[0]) == 0.0);
      }
      CHECK(max_abs_diff(homo.ensemble, homo.probs[0]) < 1e-12);
    }
  }
}

TEST_CASE("a training step touches only the blocks of its architecture") {
  Supernet<double> net(fixture::plan(3, 3), 9);
  Rng rng(10);
  const auto batch = random_samples(8, 4, rng);
  const auto arch = make_arch(2, {0}, {{0, 1}, {1, 2}});
  const auto before = net;
  TrainConfig cfg;
  train_step(net, arch, batch, cfg, 0.1);
  std::set<std::pair<int, int>> used;
  for (auto* b : net.blocks_for(arch)) used.insert({b->layer, b->op_id});
  for (int m = 1; m <= 3; ++m) {
    for (int op = 0; op < 3; ++op) {
      const auto& b = net.block(m, op);
      const auto& b0 = before.block(m, op);
      bool same = true;
      for (std::size_t t = 0; t < b.weights.size(); ++t) same = same && b.weights[t] == b0.weights[t];
      if (used.count({m, op})) {
        CHECK_FALSE(same);
      } else {
        CHECK(same);
        for (const auto& g : b.grads) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
        CHECK(b.steps == 0);
      }
    }
  }
  CHECK(used.size() == 2 + 4 + 1);  // stem, head, layer 1, two ops at 2 and 3
}

TEST_CASE("shared prefix gradient is the sum of single-path gradients") {
  Supernet<double> net(fixture::plan(3, 3), 11);
  Rng rng(12);
  const auto batch = random_samples(6, 4, rng);
  const auto arch = make_arch(2, {2}, {{0, 1}, {0, 2}});

  auto grads_of = [&](const EnsembleArchitecture& a) {
    for (auto* b : net.all_blocks()) b->zero_grad();
    compute_gradients(net, a, batch, Mode::train, false);
    std::map<std::pair<int, int>, std::vector<Eigen::VectorXd>> g;
    for (const auto* b : net.all_blocks()) g[{b->layer, b->op_id}] = b->grads;
    return g;
  };
  const auto joint = grads_of(arch);
  const auto g0 = grads_of(fixture::single_path(arch, 0));
  const auto g1 = grads_of(fixture::single_path(arch, 1));
  double worst = 0;
  for (const auto& [key, gs] : joint) {
    for (std::size_t t = 0; t < gs.size(); ++t) {
      const Eigen::VectorXd sum = g0.at(key)[t] + g1.at(key)[t];
      worst = std::max(worst, (gs[t] - sum).cwiseAbs().maxCoeff());
    }
  }
  CHECK(worst < 1e-10);
  // the prefix really receives both paths
  const auto& p0 = g0.at({1, 2})[0];
  CHECK(p0.cwiseAbs().maxCoeff() > 0.0);
  CHECK((joint.at({1, 2})[0] - p0).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("recalibration reproduces whole-probe batch statistics") {
  Supernet<double> net(fixture::plan(4, 3), 13);
  Rng rng(14);
  const auto warm = random_samples(16, 4, rng);
  TrainConfig cfg;
  const auto arch = make_arch(2, {1, 0}, {{0, 2}, {1, 2}});
  train_step(net, arch, warm, cfg, 0.05);
  const auto probe = random_images(30, 8, rng);
  const auto expected = fixture::probe_moments(net, arch, probe);
  CHECK(expected.size() == 1 + 2 * 3 + 4 * 3);

  const auto untouched = net.block(3, 1).bn[0].mean;
  recalibrate_bn(net, arch, probe);
  CHECK(fixture::bn_stat_deviation(net, expected) < 1e-6);
  CHECK(net.block(3, 1).bn[0].mean == untouched);

  // stale running stats play no part
  recalibrate_bn(net, arch, probe);
  CHECK(fixture::bn_stat_deviation(net, expected) < 1e-6);

  CHECK_THROWS_AS(recalibrate_bn(net, arch, Tensor<double>(0, 1, 8, 8)), InputError);
}

TEST_CASE("architectures share operator weights") {
  Supernet<double> net(fixture::plan(3, 3), 15);
  const auto a = make_arch(1, {0, 1, 2}, {});
  const auto b = make_arch(2, {0}, {{1, 2}, {0, 1}});
  const auto ba = net.blocks_for(a);
  const auto bb = net.blocks_for(b);
  CHECK(std::find(bb.begin(), bb.end(), &net.block(1, 0)) != bb.end());
  CHECK(std::find(ba.begin(), ba.end(), &net.block(1, 0)) != ba.end());

  Rng rng(16);
  const auto x = random_images(4, 8, rng);
  const auto before = forward_ensemble(net, b, x, Mode::eval);
  train_step(net, a, random_samples(8, 4, rng), TrainConfig{}, 0.1);
  const auto after = forward_ensemble(net, b, x, Mode::eval);
  CHECK(max_abs_diff(before.ensemble, after.ensemble) > 0.0);
}

TEST_CASE("features of mirrored paths coincide") {
  Supernet<double> net(fixture::plan(3, 3, 6), 17);
  Rng rng(18);
  const auto probe = random_images(9, 8, rng);
  const auto arch = mirror_homogeneous(make_arch(2, {1}, {{0, 2}, {1, 2}}), 2);
  const auto f = extract_features(net, arch, probe);
  REQUIRE(f.size() == 2);
  CHECK(f[0].size() == net.plan().features());
  CHECK(f[0].size() == 6);
  CHECK(f[0] == f[1]);
  const auto g = extract_features(net, make_arch(2, {1}, {{0, 2}, {1, 2}}), probe);
  CHECK(g[0] != g[1]);
}

TEST_CASE("untrained network scores at chance on random labels") {
  Supernet<double> net(fixture::plan(2, 3), 19);
  Rng rng(20);
  const int n = 600;
  const auto data = random_samples(n, 4, rng);
  const auto arch = make_arch(2, {0}, {{1, 2}});
  const double acc = evaluate_paths(net, arch, data, 64).ensemble_accuracy;
  const double sigma = std::sqrt(0.25 * 0.75 / n);
  CHECK(std::abs(acc - 0.25) <= 3 * sigma);
}

TEST_CASE("accuracy is invariant to duplicating the split") {
  Supernet<double> net(fixture::plan(2, 3), 21);
  Rng rng(22);
  const auto data = random_samples(40, 4, rng);
  Samples<double> twice{Tensor<double>(80, 1, 8, 8), data.labels};
  twice.labels.insert(twice.labels.end(), data.labels.begin(), data.labels.end());
  const auto& s = data.images.storage();
  twice.images.storage() << s, s;
  const auto arch = make_arch(2, {0}, {{1, 2}});
  const auto r1 = evaluate_paths(net, arch, data, 16);
  const auto r2 = evaluate_paths(net, arch, twice, 13);
  CHECK(r1.ensemble_accuracy == r2.ensemble_accuracy);
  CHECK(r1.path_accuracy == r2.path_accuracy);
}

TEST_CASE("evaluation agrees with a direct mean-probability scorer") {
  Supernet<double> net(fixture::plan(3, 3), 23);
  Rng rng(24);
  const auto data = random_samples(50, 4, rng);
  TrainConfig cfg;
  const auto arch = make_arch(2, {2}, {{0, 1}, {0, 2}});
  for (int i = 0; i < 5; ++i) train_step(net, arch, data, cfg, 0.1);

  const auto p0 = forward_ensemble(net, fixture::single_path(arch, 0), data.images, Mode::eval);
  const auto p1 = forward_ensemble(net, fixture::single_path(arch, 1), data.images, Mode::eval);
  int correct = 0, c0 = 0;
  for (int n = 0; n < data.size(); ++n) {
    int best = 0, best0 = 0;
    for (int c = 1; c < 4; ++c) {
      if (p0.probs[0](n, c) + p1.probs[0](n, c) > p0.probs[0](n, best) + p1.probs[0](n, best)) best = c;
      if (p0.probs[0](n, c) > p0.probs[0](n, best0)) best0 = c;
    }
    correct += best == data.labels[static_cast<std::size_t>(n)];
    c0 += best0 == data.labels[static_cast<std::size_t>(n)];
  }
  const auto r = evaluate_paths(net, arch, data, 16);
  CHECK(r.ensemble_accuracy == doctest::Approx(correct / 50.0));
  CHECK(r.path_accuracy[0] == doctest::Approx(c0 / 50.0));
}

TEST_CASE("training failures are reported") {
  Supernet<double> net(fixture::plan(2, 3), 25);
  Rng rng(26);
  const auto batch = random_samples(4, 4, rng);
  const auto arch = make_arch(1, {0, 1}, {});
  auto frozen = net;
  frozen.freeze();
  CHECK_THROWS_AS(train_step(frozen, arch, batch, TrainConfig{}, 0.1), InvariantError);
  net.block(1, 0).weights[0][0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_step(net, arch, batch, TrainConfig{}, 0.1), TrainingError);
  CHECK_THROWS_AS(forward_ensemble(net, make_arch(1, {0}, {}), batch.images, Mode::eval),
                  ConfigError);
}

TEST_CASE("saved supernets reload bit-identically") {
  Supernet<double> net(fixture::plan(3, 3), 27);
  Rng rng(28);
  const auto batch = random_samples(8, 4, rng);
  const auto arch = make_arch(2, {0}, {{0, 1}, {1, 2}});
  train_step(net, arch, batch, TrainConfig{}, 0.1);
  const auto path = (std::filesystem::temp_directory_path() / "neas_supernet_test.bin").string();
  save_supernet(net, path);
  Supernet<double> other(fixture::plan(3, 3), 99);
  load_supernet(other, path);
  std::filesystem::remove(path);
  const auto a = forward_ensemble(net, arch, batch.images, Mode::eval);
  const auto b = forward_ensemble(other, arch, batch.images, Mode::eval);
  CHECK(max_abs_diff(a.ensemble, b.ensemble) == 0.0);
  CHECK(other.block(2, 1).velocity[0] == net.block(2, 1).velocity[0]);
}

TEST_CASE("two-path gradient check") {
  Supernet<double> net(fixture::plan(4, 3), 29);
  jitter_bn_affine(net, 30);
  Rng rng(31);
  const auto batch = random_samples(4, 4, rng);
  const auto arch = make_arch(2, {0, 1}, {{0, 2}, {1, 2}});
  const auto r = grad_check(net, arch, batch, 1e-5, 0, 32);
  CHECK(r.checked > 100);
  CHECK(r.max_relative_error < 1e-4);
}
