#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "grouprag/error.hpp"
#include "grouprag/wif_policy.hpp"
#include "oracles.hpp"
#include "support.hpp"
#include "synthetic.hpp"

using namespace grouprag;
using namespace grouprag::policy;

namespace {

RoleLabels labels(std::set<int> c, std::set<int> s, std::set<int> n) { return {std::move(c), std::move(s), std::move(n)}; }

std::vector<int> random_roles(std::mt19937_64& rng, int n) {
  std::vector<int> roles(static_cast<std::size_t>(n));
  for (auto& r : roles) r = static_cast<int>(rng() % 3);
  return roles;
}

RoleLabels labels_of(const std::vector<int>& roles) {
  RoleLabels l;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    (roles[i] == 0 ? l.core : roles[i] == 1 ? l.support : l.noise).insert(static_cast<int>(i));
  }
  return l;
}

Selection mask(std::uint32_t bits, int n) {
  Selection s(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = (bits >> i) & 1U;
  return s;
}

FeatureMatrix random_features(std::mt19937_64& rng, int n, int d) {
  FeatureMatrix f(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(d)));
  for (auto& row : f) {
    for (auto& x : row) x = testing::uniform(rng, -1.0, 1.0);
  }
  return f;
}

}  // namespace

TEST_CASE("WIF hand-derived values") {
  CHECK(wif_score(std::set<int>{0, 1, 2}, labels({0, 1}, {2}, {3})) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(wif_score(std::set<int>{}, labels({0, 1}, {2}, {3})) == 0.0);
  CHECK(wif_score(std::set<int>{0, 2}, labels({0, 1}, {}, {2, 3})) ==
        doctest::Approx(std::pow(0.5, 2.5) * 0.25).epsilon(1e-12));
  CHECK(std::abs(wif_score(std::set<int>{0, 2}, labels({0, 1}, {}, {2, 3})) - 0.044194) < 1e-6);
  CHECK(wif_score(std::set<int>{0, 1, 3}, labels({0, 1}, {2}, {3})) == 0.0);
  CHECK(wif_score(std::set<int>{2}, labels({}, {2}, {})) == doctest::Approx(1.5));
  CHECK_THROWS_AS(wif_score(std::set<int>{7}, labels({0}, {}, {})), InputError);
}

TEST_CASE("WIF params validation and role names") {
  CHECK_NOTHROW(WifParams{}.validate());
  CHECK_THROWS_AS((WifParams{1.0, 2.0, 0.5}.validate()), InputError);
  CHECK_THROWS_AS((WifParams{2.5, 2.0, 2.0}.validate()), InputError);
  CHECK(role_from_string("core") == Role::core);
  CHECK(role_from_string("SUPPORT") == Role::support);
  CHECK(to_string(Role::noise) == "Noise");
  CHECK_THROWS_AS(role_from_string("maybe"), InputError);
  CHECK_THROWS_AS(labels({0}, {0}, {}).validate(1), InputError);
  CHECK_THROWS_AS(labels({0}, {}, {}).validate(2), InputError);
}

TEST_CASE("WIF agrees with a counting oracle and stays in range") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    int n = testing::uniform_int(rng, 1, 9);
    auto roles = random_roles(rng, n);
    auto l = labels_of(roles);
    for (std::uint32_t bits = 0; bits < (1U << n); ++bits) {
      auto sel = mask(bits, n);
      std::vector<bool> picked(sel.begin(), sel.end());
      double got = wif_score(sel, l);
      CHECK(got == doctest::Approx(oracle::wif(roles, picked)).epsilon(1e-12));
      CHECK(got >= 0.0);
      CHECK(got <= 1.5 + 1e-12);
    }
  }
}

// The empty selection scores 0 by convention, so adding Noise to it can raise
// WIF; monotonicity is a property of non-empty selections.
TEST_CASE("WIF monotonicity under noise additions and core removals") {
  CHECK(wif_score(std::set<int>{0}, labels({}, {}, {0, 1})) == doctest::Approx(0.25));

  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 300; ++trial) {
    int n = testing::uniform_int(rng, 2, 9);
    auto roles = random_roles(rng, n);
    auto l = labels_of(roles);
    auto sel = mask(static_cast<std::uint32_t>(rng()) & ((1U << n) - 1), n);
    if (std::count(sel.begin(), sel.end(), 1) == 0) continue;
    const double base = wif_score(sel, l);
    for (int i = 0; i < n; ++i) {
      auto changed = sel;
      if (roles[static_cast<std::size_t>(i)] == 2 && !sel[static_cast<std::size_t>(i)]) {
        changed[static_cast<std::size_t>(i)] = 1;
        CHECK(wif_score(changed, l) <= base + 1e-15);
      }
      if (roles[static_cast<std::size_t>(i)] == 0 && sel[static_cast<std::size_t>(i)]) {
        changed[static_cast<std::size_t>(i)] = 0;
        CHECK(wif_score(changed, l) <= base + 1e-15);
      }
    }
  }
}

TEST_CASE("core plus support is the unique WIF maximizer") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 60; ++trial) {
    int n = testing::uniform_int(rng, 2, 10);
    auto roles = random_roles(rng, n);
    roles[0] = 0;
    roles[1] = 2;
    auto l = labels_of(roles);
    std::uint32_t target = 0;
    for (int i = 0; i < n; ++i) target |= roles[static_cast<std::size_t>(i)] != 2 ? (1U << i) : 0U;
    const double best = wif_score(mask(target, n), l);
    CHECK(best == doctest::Approx(l.support.empty() ? 1.0 : 1.5));
    for (std::uint32_t bits = 0; bits < (1U << n); ++bits) {
      if (bits != target) CHECK(wif_score(mask(bits, n), l) < best);
    }
  }
}

TEST_CASE("selection_probs") {
  auto probs = selection_probs(PolicyParams::zeros(3), {{1, 2, 3}, {0, 0, 0}});
  CHECK(probs == std::vector<double>{0.5, 0.5});
  auto sat = selection_probs({{0.0}, 30.0}, {{1.0}});
  CHECK(sat[0] == kProbCeil);
  auto low = selection_probs({{0.0}, -30.0}, {{1.0}});
  CHECK(low[0] == kProbFloor);
  CHECK(selection_probs({{2.0}, 0.0}, {{1.0}})[0] == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK_THROWS_AS(selection_probs(PolicyParams::zeros(2), {{1.0}}), InputError);
}

TEST_CASE("threshold_select rescues the empty decision") {
  std::vector<double> low{0.1, 0.2};
  CHECK(threshold_select(low) == std::set<int>{1});
  std::vector<double> tie{0.3, 0.3};
  CHECK(threshold_select(tie) == std::set<int>{0});
  std::vector<double> mixed{0.5, 0.49, 0.9};
  CHECK(threshold_select(mixed) == std::set<int>{0, 2});
}

TEST_CASE("sample_rollouts") {
  std::vector<double> certain(4, kProbCeil);
  for (const auto& r : sample_rollouts(certain, 20, 1)) CHECK(r == Selection(4, 1));

  std::vector<double> half(5, 0.5);
  auto many = sample_rollouts(half, 10000, 99);
  for (std::size_t i = 0; i < 5; ++i) {
    double freq = 0;
    for (const auto& r : many) freq += r[i];
    CHECK(std::abs(freq / 10000.0 - 0.5) < 0.02);
  }
  CHECK(sample_rollouts(half, 8, 5) == sample_rollouts(half, 8, 5));
  CHECK(sample_rollouts(half, 8, 5) != sample_rollouts(half, 8, 6));
}

TEST_CASE("log_prob") {
  std::vector<double> half{0.5, 0.5};
  CHECK(log_prob(half, {1, 0}) == doctest::Approx(-1.386294).epsilon(1e-6));
  std::vector<double> p{0.9};
  CHECK(log_prob(p, {0}) == doctest::Approx(-2.302585).epsilon(1e-6));
  std::vector<double> certain(3, kProbCeil);
  CHECK(std::abs(log_prob(certain, {1, 1, 1})) < 1e-5);
}

TEST_CASE("selection probabilities normalize over all subsets") {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    int n = testing::uniform_int(rng, 1, 10);
    std::vector<double> probs(static_cast<std::size_t>(n));
    for (auto& p : probs) p = testing::uniform(rng, 0.01, 0.99);
    double total = 0.0;
    for (std::uint32_t bits = 0; bits < (1U << n); ++bits) {
      double lp = log_prob(probs, mask(bits, n));
      CHECK(lp <= 0.0);
      total += std::exp(lp);
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("advantages") {
  std::vector<double> r{1.5, 0.5, 1.0};
  auto a = advantages(r);
  CHECK(a[0] == doctest::Approx(1.224744).epsilon(1e-6));
  CHECK(a[1] == doctest::Approx(-1.224744).epsilon(1e-6));
  CHECK(a[2] == 0.0);
  std::vector<double> same(6, 0.7);
  CHECK(advantages(same) == std::vector<double>(6, 0.0));
  std::vector<double> one{3.0};
  CHECK(advantages(one) == std::vector<double>{0.0});

  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 200; ++trial) {
    int k = testing::uniform_int(rng, 2, 32);
    std::vector<double> rewards(static_cast<std::size_t>(k));
    for (auto& x : rewards) x = testing::uniform(rng, 0.0, 1.5);
    auto adv = advantages(rewards);
    CHECK(std::abs(std::accumulate(adv.begin(), adv.end(), 0.0)) < 1e-9 * k);
  }
}

TEST_CASE("analytic gradient matches finite differences") {
  std::mt19937_64 rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = testing::uniform_int(rng, 2, 8);
    auto features = random_features(rng, n, 8);
    PolicyParams params = PolicyParams::zeros(8);
    for (auto& w : params.weights) w = testing::uniform(rng, -0.5, 0.5);
    params.bias = testing::uniform(rng, -0.5, 0.5);
    auto rollouts = sample_rollouts(selection_probs(params, features), 8, rng());
    std::vector<double> adv(8);
    for (auto& a : adv) a = testing::uniform(rng, -1.5, 1.5);

    auto g = policy_gradient(params, features, rollouts, adv);
    std::vector<double> analytic = g.weights;
    analytic.push_back(g.bias);
    auto numeric = oracle::numeric_gradient(params, [&](const PolicyParams& p) {
      return policy_loss(p, features, rollouts, adv);
    });
    CHECK(oracle::max_relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("equal rewards leave parameters unchanged") {
  SelectionInstance inst{"q", {{1.0}, {0.0}}, labels({0, 1}, {}, {})};
  PolicyParams params{{0.0}, 30.0};  // always selects everything -> identical rewards
  auto step = policy_gradient_step(params, inst, 8, 0.5, 3);
  CHECK(step.params == params);
  CHECK(step.mean_reward == doctest::Approx(1.0));
  for (const auto& r : step.rollouts) CHECK(r.advantage == 0.0);
}

TEST_CASE("policy gradient step records rollouts") {
  auto data = testing::separable_instances(1, 4);
  auto step = policy_gradient_step(PolicyParams::zeros(8), data[0], 8, 0.1, 11);
  REQUIRE(step.rollouts.size() == 8);
  double mean = 0;
  for (const auto& r : step.rollouts) {
    CHECK(r.reward >= 0.0);
    CHECK(r.reward <= 1.5);
    CHECK(r.log_prob == doctest::Approx(log_prob(std::vector<double>(data[0].size(), 0.5), r.selection)));
    mean += r.reward / 8;
  }
  CHECK(step.mean_reward == doctest::Approx(mean));
}

TEST_CASE("train_policy learns the separable benchmark") {
  auto data = testing::separable_instances(40, 8);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.seed = 3;
  auto result = train_policy(data, cfg);
  REQUIRE(result.history.size() == 6);
  CHECK(result.history.back() > result.history.front());
  CHECK(result.params.weights[0] > 0.0);
  CHECK(result.params.weights[1] < 0.0);
  CHECK(mean_decision_wif(result.params, data) > mean_decision_wif(PolicyParams::zeros(8), data));

  auto again = train_policy(data, cfg);
  CHECK(again.params == result.params);
  CHECK(again.history == result.history);

  cfg.epochs = 0;
  auto none = train_policy(data, cfg);
  CHECK(none.params == PolicyParams::zeros(8));
  CHECK(none.history.empty());
}

TEST_CASE("train_policy rejects inconsistent datasets") {
  auto data = testing::separable_instances(3, 1);
  data[1].features[0].push_back(0.0);
  CHECK_THROWS_AS(train_policy(data, TrainConfig{}), InputError);
  CHECK_THROWS_AS(train_policy({}, TrainConfig{}), InputError);
}

TEST_CASE("instances and policies persist") {
  testing::TempDir dir("policy");
  auto data = testing::separable_instances(3, 2);
  {
    std::ofstream out(dir / "inst.jsonl");
    for (const auto& inst : data) out << instance_to_json(inst).dump() << "\n";
  }
  CHECK(load_instances(dir / "inst.jsonl") == data);

  PolicyParams params{{0.25, -1.5}, 0.125};
  save_policy(params, WifParams{}, dir / "policy.json");
  WifParams wif{0, 0, 0};
  CHECK(load_policy(dir / "policy.json", &wif) == params);
  CHECK(wif == WifParams{});

  auto doc = policy_to_json(params, WifParams{});
  doc["bias"] = 9.0;
  CHECK_THROWS_AS(policy_from_json(doc), InputError);
}

TEST_CASE("instance loading reports line numbers and offending qids") {
  testing::TempDir dir("inst-bad");
  std::ofstream(dir / "bad.jsonl") << R"({"qid": "a", "features": [[1, 0]], "labels": {"core": [0]}})" << "\n"
                                   << "{broken\n";
  try {
    load_instances(dir / "bad.jsonl");
    FAIL("expected error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  std::ofstream(dir / "dim.jsonl") << R"({"qid": "a", "features": [[1, 0]], "labels": {"core": [0]}})" << "\n"
                                   << R"({"qid": "odd", "features": [[1]], "labels": {"core": [0]}})" << "\n";
  try {
    load_instances(dir / "dim.jsonl");
    FAIL("expected error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("odd") != std::string::npos);
  }
}
