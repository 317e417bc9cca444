#include <doctest.h>

#include <cmath>
#include <set>

#include "mce/datasets.hpp"
#include "mce/ensemble.hpp"
#include "mce/errors.hpp"
#include "support/reference_mce.hpp"

using namespace mce;

namespace {

ClassPrior uniform_prior(int C) {
  ClassPrior p;
  p.probs = Eigen::VectorXd::Constant(C, 1.0 / C);
  p.log_probs = p.probs.array().log();
  return p;
}

}  // namespace

TEST_SUITE("mce_ensemble") {

TEST_CASE("compute_prior counts label frequencies") {
  const ClassPrior p = compute_prior({0, 1, 0, 1}, 2);
  CHECK(p.probs(0) == doctest::Approx(0.5));
  CHECK(p.probs(1) == doctest::Approx(0.5));

  const ClassPrior q = compute_prior({0, 0, 0, 1}, 2);
  CHECK(q.probs(0) == doctest::Approx(0.75));
  CHECK(q.probs(1) == doctest::Approx(0.25));

  std::vector<int> balanced;
  for (int c = 0; c < 10; ++c) balanced.insert(balanced.end(), 200, c);
  const ClassPrior r = compute_prior(balanced, 10);
  for (int c = 0; c < 10; ++c) CHECK(r.probs(c) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("compute_prior rejects empty and missing-class label sets") {
  CHECK_THROWS_AS(compute_prior({}, 2), DataError);
  CHECK_THROWS_AS(compute_prior({0, 0, 0}, 2), DataError);  // class 1 absent
}

TEST_CASE("prior probabilities sum to one within 1e-12") {
  const ClassPrior p = compute_prior({0, 1, 2, 2, 1, 0, 2}, 3);
  CHECK(std::abs(p.probs.sum() - 1.0) < 1e-12);
}

TEST_CASE("predict with zero scores and uniform prior is uniform everywhere") {
  const auto bundle = predict(Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(4),
                              uniform_prior(4));
  for (int c = 0; c < 4; ++c) {
    CHECK(bundle.y_e(c) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(bundle.y_l(c) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(bundle.y_h(c) == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("a neutral higher expert makes the ensemble equal the lower prediction") {
  Eigen::VectorXd o_l(3);
  o_l << 0.7, -1.2, 0.4;
  const auto bundle = predict(Eigen::VectorXd::Zero(3), o_l, uniform_prior(3));
  CHECK((bundle.y_e - bundle.y_l).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("prior neutrality: uniform prior and zero lower scores give y_e == y_h") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    Eigen::VectorXd o_h(5);
    for (int i = 0; i < 5; ++i) o_h(i) = rng.uniform(-3.0, 3.0);
    const auto bundle = predict(o_h, Eigen::VectorXd::Zero(5), uniform_prior(5));
    CHECK((bundle.y_e - bundle.y_h).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("log-space additivity on a 3-class numeric case") {
  Eigen::VectorXd o_h(3), o_l(3);
  o_h << 1, 0, 0;
  o_l << 0, 1, 0;
  const auto bundle = predict(o_h, o_l, uniform_prior(3));
  Eigen::VectorXd expected(3);
  expected << 1, 1, 0;
  const Eigen::VectorXd want = softmax(expected);
  CHECK((bundle.y_e - want).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("every prediction vector lies on the simplex within 1e-12") {
  Rng rng(6);
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::VectorXd o_h(6), o_l(6), prior_scores(6);
    for (int i = 0; i < 6; ++i) {
      o_h(i) = rng.uniform(-40.0, 40.0);
      o_l(i) = rng.uniform(-40.0, 40.0);
      prior_scores(i) = rng.uniform(0.01, 1.0);
    }
    ClassPrior prior;
    prior.probs = prior_scores / prior_scores.sum();
    prior.log_probs = prior.probs.array().log();
    const auto bundle = predict(o_h, o_l, prior);
    for (const auto* v : {&bundle.y_e, &bundle.y_l, &bundle.y_h}) {
      CHECK(std::abs(v->sum() - 1.0) < 1e-12);
      CHECK(v->minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("stratified batches cover every class and every example") {
  Rng rng(7);
  std::vector<int> labels;
  for (int c = 0; c < 5; ++c) labels.insert(labels.end(), 40, c);
  rng.shuffle(labels);

  StratifiedBatcher batcher(labels, 5, 60);
  CHECK(batcher.batches_per_epoch() == 4);  // ceil(200/60)

  Rng epoch_rng(8);
  const auto batches = batcher.epoch_batches(epoch_rng);
  REQUIRE(batches.size() == 4);
  std::set<int> visited;
  for (const auto& batch : batches) {
    std::vector<int> per_class(5, 0);
    for (int idx : batch) {
      visited.insert(idx);
      per_class[static_cast<size_t>(labels[static_cast<size_t>(idx)])]++;
    }
    for (int c = 0; c < 5; ++c) {
      CHECK(per_class[static_cast<size_t>(c)] >= 60 / (2 * 5));
    }
  }
  CHECK(visited.size() == labels.size());
}

TEST_CASE("mce loss with w = 0 reduces to the ensemble term") {
  const MnistData pool = synthetic_pool(60, 900);
  const BundleSizes sizes{30, 5, 5, 5};
  const DatasetBundle bundle = synthesize(BiasKind::Background, pool, sizes, 1);

  Rng init_h(1), init_l(2), do_h(3), do_l(4);
  MceModel model;
  model.higher = make_model(Arch::ConvNet, 10, 0.5, init_h);
  model.lower = make_model(Arch::MlpNet, 10, 0.5, init_l);
  model.prior = compute_prior(bundle.train.labels, 10);
  model.w = 0.0;
  model.alpha = 0.002;

  Graph g;
  const MceLoss nodes = build_mce_loss(g, model, bundle.train.images, bundle.train.labels, false,
                                       do_h, do_l, true, nullptr, nullptr);
  CHECK(g.value(nodes.loss)[0] == g.value(nodes.ensemble_ce)[0]);
}

TEST_CASE("perfect predictions give zero loss") {
  // The loss formula itself: certain log-probabilities at the labels.
  Graph g;
  Tensor lp({2, 3});
  lp.fill(-50.0);
  lp.at(0, 1) = 0.0;
  lp.at(1, 2) = 0.0;
  auto ce_e = cross_entropy(g, g.input(lp), {1, 2});
  auto ce_l = cross_entropy(g, g.input(lp), {1, 2});
  auto loss = add(g, ce_e, scale(g, ce_l, 0.2));
  CHECK(g.value(loss)[0] == doctest::Approx(0.0));
}

TEST_CASE("mce loss matches the straight-line reference implementation") {
  // Feature-level comparison on a seeded toy batch: the graph path and the
  // from-scratch gradient-descent implementation agree on the loss value.
  Rng rng(1234);
  const int B = 24, C = 3;
  Eigen::MatrixXd zh(B, C), zl(B, C);
  std::vector<int> labels;
  for (int b = 0; b < B; ++b) {
    labels.push_back(b % C);
    for (int c = 0; c < C; ++c) {
      zh(b, c) = rng.uniform(-2.0, 2.0);
      zl(b, c) = rng.uniform(-2.0, 2.0);
    }
  }
  ClassPrior prior = uniform_prior(C);
  const double alpha = 0.01, w = 0.2;

  Graph g;
  Tensor zh_t({B, C}), zl_t({B, C});
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) {
      zh_t.at(r, c) = zh(r, c);
      zl_t.at(r, c) = zl(r, c);
    }
  }
  auto oh = argmin_classifier_node(g, g.input(zh_t), labels, prior, alpha, true, nullptr, nullptr);
  auto ol = argmin_classifier_node(g, g.input(zl_t), labels, prior, alpha, true, nullptr, nullptr);
  auto ens = add_rowvec(g, add(g, oh, ol), prior.log_row());
  auto low = add_rowvec(g, ol, prior.log_row());
  auto loss = add(g, cross_entropy(g, log_softmax(g, ens), labels),
                  scale(g, cross_entropy(g, log_softmax(g, low), labels), w));

  const double reference =
      testref::mce_loss(zh, zl, labels, prior.log_probs, alpha, w, 400000, 0.5);
  CHECK(g.value(loss)[0] == doctest::Approx(reference).epsilon(1e-6));
}

TEST_CASE("freezing twice on the same sample is deterministic") {
  const MnistData pool = synthetic_pool(50, 901);
  const DatasetBundle bundle = synthesize(BiasKind::Background, pool, {25, 5, 5, 5}, 2);

  Rng init_h(1), init_l(2);
  MceModel model;
  model.higher = make_model(Arch::ConvNet, 10, 0.5, init_h);
  model.lower = make_model(Arch::MlpNet, 10, 0.5, init_l);
  model.prior = compute_prior(bundle.train.labels, 10);

  freeze_eval_classifiers(model, bundle.train.images, bundle.train.labels);
  const ResidualAffineParams first_h = *model.frozen_theta_h;
  const ResidualAffineParams first_l = *model.frozen_theta_l;
  freeze_eval_classifiers(model, bundle.train.images, bundle.train.labels);
  CHECK((first_h.W - model.frozen_theta_h->W).cwiseAbs().maxCoeff() == 0.0);
  CHECK((first_l.b - model.frozen_theta_l->b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("freeze rejects samples missing a class") {
  const MnistData pool = synthetic_pool(30, 902);
  const DatasetBundle bundle = synthesize(BiasKind::Background, pool, {10, 5, 5, 5}, 3);
  Rng init_h(1);
  MceModel model;
  model.higher = make_model(Arch::ConvNet, 10, 0.5, init_h);
  model.prior = compute_prior(bundle.train.labels, 10);
  std::vector<int> broken = bundle.train.labels;
  for (auto& y : broken) {
    if (y == 3) y = 4;
  }
  CHECK_THROWS_AS(freeze_eval_classifiers(model, bundle.train.images, broken), DataError);
}

TEST_CASE("frozen and per-batch classifier predictions agree on the training sample") {
  // Self-consistency: theta solved on a stratified half of the sample gives
  // predictions close to theta solved on the whole sample.
  const MnistData pool = synthetic_pool(60, 903);
  const DatasetBundle bundle = synthesize(BiasKind::Background, pool, {40, 5, 5, 5}, 4);
  Rng init(9);
  auto model = make_model(Arch::MlpNet, 10, 0.5, init);
  const ClassPrior prior = compute_prior(bundle.train.labels, 10);

  const Eigen::MatrixXd z = eval_logits(*model, bundle.train.images);
  InnerProblem full;
  full.features = z;
  full.labels = bundle.train.labels;
  full.log_prior = prior.log_probs;
  full.alpha = 0.002;
  const ResidualAffineParams frozen = solve(full).params;

  StratifiedBatcher batcher(bundle.train.labels, 10, 200);
  Rng rng(10);
  const auto batches = batcher.epoch_batches(rng);
  InnerProblem half;
  half.features.resize(static_cast<Eigen::Index>(batches[0].size()), 10);
  for (size_t i = 0; i < batches[0].size(); ++i) {
    half.features.row(static_cast<Eigen::Index>(i)) = z.row(batches[0][i]);
    half.labels.push_back(bundle.train.labels[static_cast<size_t>(batches[0][i])]);
  }
  half.log_prior = prior.log_probs;
  half.alpha = 0.002;
  const ResidualAffineParams per_batch = solve(half).params;

  double tv = 0.0;
  for (Eigen::Index r = 0; r < half.features.rows(); ++r) {
    const Eigen::VectorXd p1 =
        softmax(classifier_logits(frozen, half.features.row(r)).row(0).transpose() +
                prior.log_probs);
    const Eigen::VectorXd p2 =
        softmax(classifier_logits(per_batch, half.features.row(r)).row(0).transpose() +
                prior.log_probs);
    tv += 0.5 * (p1 - p2).cwiseAbs().sum();
  }
  tv /= static_cast<double>(half.features.rows());
  CHECK(tv < 0.05);
}

TEST_CASE("test predictions require frozen classifiers") {
  Rng init(11);
  MceModel model;
  model.higher = make_model(Arch::MlpNet, 4, 0.5, init);
  model.prior = uniform_prior(4);
  Tensor x({1, 3, 28, 28});
  CHECK_THROWS_AS(test_predictions(model, x), StateError);
}

TEST_CASE("argmax tie-breaking picks the lowest class index") {
  Eigen::VectorXd scores(4);
  scores << 0.0, 0.0, -1.0, 0.0;
  CHECK(argmax_tie_low(scores) == 0);
  Eigen::VectorXd strong(3);
  strong << 2.0, 0.0, 0.0;
  CHECK(argmax_tie_low(strong) == 0);
}

TEST_CASE("adding a constant to all scores never changes the prediction") {
  Rng rng(12);
  for (int rep = 0; rep < 30; ++rep) {
    Eigen::VectorXd scores(6);
    for (int i = 0; i < 6; ++i) scores(i) = rng.uniform(-2.0, 2.0);
    const int before = argmax_tie_low(scores);
    CHECK(argmax_tie_low((scores.array() + 37.5).matrix()) == before);
  }
}

TEST_CASE("prune_candidates with t = 0 is the plain argmax") {
  Eigen::VectorXd lower(3), higher(3);
  lower << 0.2, 0.5, 0.3;
  higher << 1.0, 3.0, 2.0;
  CHECK(prune_candidates(lower, higher, 0.0) == argmax_tie_low(higher));
}

TEST_CASE("prune_candidates masks low-probability classes") {
  Eigen::VectorXd lower(3), higher(3);
  lower << 0.9, 0.05, 0.05;
  higher << 0.0, 5.0, 1.0;  // favors class 1
  CHECK(prune_candidates(lower, higher, 0.1) == 0);  // classes 1 and 2 pruned
}

TEST_CASE("prune_candidates falls back to the plain argmax when all are masked") {
  Eigen::VectorXd lower(3), higher(3);
  lower << 0.2, 0.3, 0.5;
  higher << 4.0, 1.0, 2.0;
  CHECK(prune_candidates(lower, higher, 0.6) == 0);
}

TEST_CASE("pruning monotonicity: growing t never unmasks a class") {
  Rng rng(13);
  const auto& grid = prune_threshold_grid();
  for (int rep = 0; rep < 20; ++rep) {
    Eigen::VectorXd lower(5);
    double total = 0.0;
    for (int i = 0; i < 5; ++i) total += (lower(i) = rng.uniform(0.0, 1.0));
    lower /= total;
    std::set<int> previous_masked;
    for (double t : grid) {
      std::set<int> masked;
      for (int c = 0; c < 5; ++c) {
        if (lower(c) < t) masked.insert(c);
      }
      for (int c : previous_masked) CHECK(masked.count(c) == 1);
      previous_masked = masked;
    }
  }
}

TEST_CASE("calibrate_threshold with zero budget returns zero") {
  Eigen::MatrixXd probs(3, 2);
  probs << 1e-12, 1.0, 0.5, 0.5, 0.9, 0.1;
  CHECK(calibrate_threshold(probs, {0, 0, 0}, 0.0) == 0.0);
}

TEST_CASE("calibrate_threshold sits just below a 0.5 floor") {
  Eigen::MatrixXd probs(10, 2);
  for (int i = 0; i < 10; ++i) {
    probs(i, 0) = 0.5 + 0.04 * i;
    probs(i, 1) = 1.0 - probs(i, 0);
  }
  const std::vector<int> gold(10, 0);  // all gold probabilities >= 0.5
  CHECK(calibrate_threshold(probs, gold, 0.001) == doctest::Approx(0.49));
}

TEST_CASE("calibrate_threshold equals a brute-force scan over the grid") {
  Rng rng(14);
  const int N = 500, C = 4;
  Eigen::MatrixXd probs(N, C);
  std::vector<int> gold;
  for (int i = 0; i < N; ++i) {
    double total = 0.0;
    for (int c = 0; c < C; ++c) total += (probs(i, c) = std::pow(rng.uniform01(), 3.0));
    probs.row(i) /= total;
    gold.push_back(static_cast<int>(rng.below(C)));
  }
  const double rate = 0.02;
  double best = 0.0;
  for (double t : prune_threshold_grid()) {
    int pruned = 0;
    for (int i = 0; i < N; ++i) {
      if (probs(i, gold[static_cast<size_t>(i)]) < t) ++pruned;
    }
    if (static_cast<double>(pruned) / N <= rate) best = std::max(best, t);
  }
  CHECK(calibrate_threshold(probs, gold, rate) == doctest::Approx(best));
}

TEST_CASE("eq6 is exact on conditionally independent tables") {
  Rng rng(15);
  for (int rep = 0; rep < 100; ++rep) {
    const int ny = 2 + static_cast<int>(rng.below(3));
    const int nh = 2 + static_cast<int>(rng.below(4));
    const int nl = 2 + static_cast<int>(rng.below(4));
    auto simplex = [&](int n) {
      std::vector<double> v(static_cast<size_t>(n));
      double total = 0.0;
      for (auto& x : v) total += (x = 0.05 + rng.uniform01());
      for (auto& x : v) x /= total;
      return v;
    };
    const auto py = simplex(ny);
    std::vector<std::vector<double>> ph, pl;
    for (int c = 0; c < ny; ++c) {
      ph.push_back(simplex(nh));
      pl.push_back(simplex(nl));
    }
    std::vector<double> joint(static_cast<size_t>(nh) * nl * ny);
    for (int a = 0; a < nh; ++a) {
      for (int b = 0; b < nl; ++b) {
        for (int c = 0; c < ny; ++c) {
          joint[(static_cast<size_t>(a) * nl + b) * ny + c] =
              py[static_cast<size_t>(c)] * ph[static_cast<size_t>(c)][static_cast<size_t>(a)] *
              pl[static_cast<size_t>(c)][static_cast<size_t>(b)];
        }
      }
    }
    CHECK(verify_ci_factorization(joint, nh, nl, ny) < 1e-12);
  }
}

TEST_CASE("a label-independent x_l is a neutral ensemble factor") {
  // P(x_l | y) = P(x_l): the reconstruction reduces to P(y | x_h).
  const std::vector<double> py = {0.3, 0.7};
  const std::vector<std::vector<double>> ph = {{0.8, 0.2}, {0.25, 0.75}};
  const std::vector<double> pl = {0.4, 0.6};
  std::vector<double> joint(2 * 2 * 2);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      for (int c = 0; c < 2; ++c) {
        joint[(static_cast<size_t>(a) * 2 + b) * 2 + c] =
            py[static_cast<size_t>(c)] * ph[static_cast<size_t>(c)][static_cast<size_t>(a)] *
            pl[static_cast<size_t>(b)];
      }
    }
  }
  CHECK(verify_ci_factorization(joint, 2, 2, 2) < 1e-12);
}

TEST_CASE("a deliberately dependent table shows positive deviation") {
  // y is (noisy) XOR of x_h and x_l: strongly conditionally dependent.
  std::vector<double> joint(2 * 2 * 2, 0.0);
  auto set = [&](int a, int b, int c, double v) {
    joint[(static_cast<size_t>(a) * 2 + b) * 2 + c] = v;
  };
  set(0, 0, 0, 0.23);
  set(0, 1, 1, 0.23);
  set(1, 0, 1, 0.23);
  set(1, 1, 0, 0.23);
  set(0, 0, 1, 0.02);
  set(0, 1, 0, 0.02);
  set(1, 0, 0, 0.02);
  set(1, 1, 1, 0.02);
  CHECK(verify_ci_factorization(joint, 2, 2, 2) > 0.05);
}

}  // TEST_SUITE
