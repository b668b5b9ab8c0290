#include "grouprag/wif_policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>

#include "grouprag/error.hpp"
#include "grouprag/text.hpp"

namespace grouprag::policy {

using nlohmann::json;

void WifParams::validate() const {
  if (!(alpha >= beta && beta > gamma && gamma >= 0.0)) {
    throw InputError("WIF parameters must satisfy alpha >= beta > gamma >= 0");
  }
}

std::string_view to_string(Role role) {
  switch (role) {
    case Role::core: return "Core";
    case Role::support: return "Support";
    case Role::noise: return "Noise";
  }
  return "Noise";
}

Role role_from_string(std::string_view name) {
  auto lower = text::to_lower(text::trim(name));
  if (lower == "core") return Role::core;
  if (lower == "support") return Role::support;
  if (lower == "noise") return Role::noise;
  throw InputError("unknown role label: " + std::string(name));
}

bool RoleLabels::contains(int id) const {
  return core.contains(id) || support.contains(id) || noise.contains(id);
}

void RoleLabels::validate(std::size_t n) const {
  if (size() != n) throw InputError("role labels must cover every conclusion exactly once");
  for (std::size_t i = 0; i < n; ++i) {
    int id = static_cast<int>(i);
    int memberships = int(core.contains(id)) + int(support.contains(id)) + int(noise.contains(id));
    if (memberships != 1) throw InputError("role labels must be disjoint and cover ids 0..n-1");
  }
}

namespace {

double recall(const std::set<int>& selection, const std::set<int>& target, double if_empty) {
  if (target.empty()) return if_empty;
  std::size_t hit = 0;
  for (int id : target) hit += selection.count(id);
  return static_cast<double>(hit) / static_cast<double>(target.size());
}

// Draws a double uniformly from [0, 1) using the top 53 bits; identical on
// every platform for a given mt19937_64 state.
double unit_draw(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<double> raw_probs(const PolicyParams& params, const FeatureMatrix& features) {
  std::vector<double> out;
  out.reserve(features.size());
  for (const auto& row : features) {
    if (row.size() != params.dim()) {
      throw InputError("feature dimension " + std::to_string(row.size()) + " does not match policy dimension " +
                       std::to_string(params.dim()));
    }
    double z = params.bias;
    for (std::size_t j = 0; j < row.size(); ++j) z += params.weights[j] * row[j];
    out.push_back(sigmoid(z));
  }
  return out;
}

}  // namespace

double wif_score(const std::set<int>& selection, const RoleLabels& labels, const WifParams& params) {
  for (int id : selection) {
    if (!labels.contains(id)) throw InputError("selection contains unknown conclusion id " + std::to_string(id));
  }
  if (selection.empty()) return 0.0;
  const double rc = recall(selection, labels.core, 1.0);
  const double rs = recall(selection, labels.support, 0.0);
  const double rn = recall(selection, labels.noise, 0.0);
  return std::pow(rc, params.alpha) * std::pow(1.0 - rn, params.beta) * (1.0 + params.gamma * rs);
}

double wif_score(const Selection& selection, const RoleLabels& labels, const WifParams& params) {
  std::set<int> ids;
  for (std::size_t i = 0; i < selection.size(); ++i) {
    if (selection[i]) ids.insert(static_cast<int>(i));
  }
  return wif_score(ids, labels, params);
}

std::vector<double> selection_probs(const PolicyParams& params, const FeatureMatrix& features) {
  auto probs = raw_probs(params, features);
  for (auto& p : probs) p = std::clamp(p, kProbFloor, kProbCeil);
  return probs;
}

std::set<int> threshold_select(std::span<const double> probs) {
  std::set<int> selected;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] >= 0.5) selected.insert(static_cast<int>(i));
  }
  if (selected.empty() && !probs.empty()) {
    auto best = std::max_element(probs.begin(), probs.end());
    selected.insert(static_cast<int>(best - probs.begin()));
  }
  return selected;
}

std::vector<Selection> sample_rollouts(std::span<const double> probs, int rollouts, std::uint64_t seed) {
  if (rollouts < 1) throw InputError("rollout count must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<Selection> out(static_cast<std::size_t>(rollouts), Selection(probs.size(), 0));
  for (auto& selection : out) {
    for (std::size_t i = 0; i < probs.size(); ++i) selection[i] = unit_draw(rng) < probs[i] ? 1 : 0;
  }
  return out;
}

double log_prob(std::span<const double> probs, const Selection& selection) {
  if (probs.size() != selection.size()) throw InputError("log_prob: selection length does not match probabilities");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) total += selection[i] ? std::log(probs[i]) : std::log(1.0 - probs[i]);
  return total;
}

std::vector<double> advantages(std::span<const double> rewards, double epsilon) {
  if (rewards.empty()) throw InputError("advantages: need at least one reward");
  if (!(epsilon > 0.0)) throw InputError("advantages: epsilon must be positive");
  std::vector<double> out(rewards.size(), 0.0);
  auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
  if (*lo == *hi) return out;

  const double k = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= k;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::sqrt(var / k);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (std_dev + epsilon);
  return out;
}

double policy_loss(const PolicyParams& params, const FeatureMatrix& features, const std::vector<Selection>& rollouts,
                   std::span<const double> advs) {
  if (rollouts.size() != advs.size()) throw InputError("policy_loss: one advantage per rollout required");
  auto probs = selection_probs(params, features);
  double total = 0.0;
  for (std::size_t k = 0; k < rollouts.size(); ++k) total += advs[k] * log_prob(probs, rollouts[k]);
  return -total / static_cast<double>(rollouts.size());
}

PolicyGradient policy_gradient(const PolicyParams& params, const FeatureMatrix& features,
                               const std::vector<Selection>& rollouts, std::span<const double> advs) {
  if (rollouts.size() != advs.size()) throw InputError("policy_gradient: one advantage per rollout required");
  auto probs = raw_probs(params, features);
  PolicyGradient grad{std::vector<double>(params.dim(), 0.0), 0.0};
  const double inv_k = 1.0 / static_cast<double>(rollouts.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (p < kProbFloor || p > kProbCeil) continue;
    // d log pi / d z_i = s_ki - p_i
    double dz = 0.0;
    for (std::size_t k = 0; k < rollouts.size(); ++k) dz += advs[k] * (static_cast<double>(rollouts[k].at(i)) - p);
    dz *= -inv_k;
    for (std::size_t j = 0; j < grad.weights.size(); ++j) grad.weights[j] += dz * features[i][j];
    grad.bias += dz;
  }
  return grad;
}

StepResult policy_gradient_step(const PolicyParams& params, const SelectionInstance& instance, int rollouts,
                                double learning_rate, std::uint64_t seed, const WifParams& wif) {
  auto probs = selection_probs(params, instance.features);
  auto draws = sample_rollouts(probs, rollouts, seed);

  std::vector<double> rewards;
  rewards.reserve(draws.size());
  for (const auto& s : draws) rewards.push_back(wif_score(s, instance.labels, wif));
  auto advs = advantages(rewards);
  auto grad = policy_gradient(params, instance.features, draws, advs);

  StepResult result;
  result.params = params;
  for (std::size_t j = 0; j < grad.weights.size(); ++j) {
    if (!std::isfinite(grad.weights[j])) {
      throw TrainingError("non-finite gradient for weight " + std::to_string(j) + " on instance " +
                          instance.question_id);
    }
    result.params.weights[j] -= learning_rate * grad.weights[j];
  }
  if (!std::isfinite(grad.bias)) throw TrainingError("non-finite bias gradient on instance " + instance.question_id);
  result.params.bias -= learning_rate * grad.bias;

  double sum = 0.0;
  for (double r : rewards) sum += r;
  result.mean_reward = sum / static_cast<double>(rewards.size());
  result.rollouts.reserve(draws.size());
  for (std::size_t k = 0; k < draws.size(); ++k) {
    result.rollouts.push_back({draws[k], rewards[k], log_prob(probs, draws[k]), advs[k]});
  }
  return result;
}

namespace {

std::size_t check_dataset(const std::vector<SelectionInstance>& dataset) {
  if (dataset.empty()) throw InputError("training dataset is empty");
  std::optional<std::size_t> dim;
  for (const auto& inst : dataset) {
    if (inst.features.empty()) throw InputError("instance " + inst.question_id + " has no conclusions");
    inst.labels.validate(inst.features.size());
    for (const auto& row : inst.features) {
      if (!dim) dim = row.size();
      if (row.size() != *dim) throw InputError("inconsistent feature dimension in instance " + inst.question_id);
      for (double v : row) {
        if (!std::isfinite(v)) throw InputError("non-finite feature in instance " + inst.question_id);
      }
    }
  }
  return *dim;
}

}  // namespace

TrainResult train_policy(const std::vector<SelectionInstance>& dataset, const TrainConfig& config) {
  const std::size_t dim = check_dataset(dataset);
  config.wif.validate();
  if (config.epochs < 0) throw InputError("epochs must be >= 0");

  TrainResult result{PolicyParams::zeros(dim), {}};
  std::vector<std::size_t> order(dataset.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = text::mix_seed(config.seed, static_cast<std::uint64_t>(epoch));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // Fisher-Yates with explicit index draws; std::shuffle is not specified
    // bit-for-bit across standard libraries.
    std::mt19937_64 rng(epoch_seed);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    double total = 0.0;
    for (std::size_t t = 0; t < order.size(); ++t) {
      auto step = policy_gradient_step(result.params, dataset[order[t]], config.rollouts, config.learning_rate,
                                       text::mix_seed(epoch_seed, t), config.wif);
      result.params = std::move(step.params);
      total += step.mean_reward;
    }
    result.history.push_back(total / static_cast<double>(order.size()));
  }
  return result;
}

double mean_sampled_wif(const PolicyParams& params, const std::vector<SelectionInstance>& dataset, int rollouts,
                        std::uint64_t seed, const WifParams& wif) {
  if (dataset.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto probs = selection_probs(params, dataset[i].features);
    double sum = 0.0;
    for (const auto& s : sample_rollouts(probs, rollouts, text::mix_seed(seed, i))) {
      sum += wif_score(s, dataset[i].labels, wif);
    }
    total += sum / rollouts;
  }
  return total / static_cast<double>(dataset.size());
}

double mean_decision_wif(const PolicyParams& params, const std::vector<SelectionInstance>& dataset,
                         const WifParams& wif) {
  if (dataset.empty()) return 0.0;
  double total = 0.0;
  for (const auto& inst : dataset) {
    total += wif_score(threshold_select(selection_probs(params, inst.features)), inst.labels, wif);
  }
  return total / static_cast<double>(dataset.size());
}

// Persistence ------------------------------------------------------------------

json wif_params_to_json(const WifParams& params) {
  return {{"alpha", params.alpha}, {"beta", params.beta}, {"gamma", params.gamma}};
}

WifParams wif_params_from_json(const json& doc) {
  WifParams p;
  p.alpha = doc.value("alpha", p.alpha);
  p.beta = doc.value("beta", p.beta);
  p.gamma = doc.value("gamma", p.gamma);
  p.validate();
  return p;
}

json labels_to_json(const RoleLabels& labels) {
  return {{"core", labels.core}, {"support", labels.support}, {"noise", labels.noise}};
}

RoleLabels labels_from_json(const json& doc) {
  RoleLabels labels;
  labels.core = doc.value("core", std::set<int>{});
  labels.support = doc.value("support", std::set<int>{});
  labels.noise = doc.value("noise", std::set<int>{});
  return labels;
}

json instance_to_json(const SelectionInstance& instance) {
  return {{"qid", instance.question_id}, {"features", instance.features}, {"labels", labels_to_json(instance.labels)}};
}

SelectionInstance instance_from_json(const json& doc) {
  SelectionInstance inst;
  inst.question_id = doc.at("qid").get<std::string>();
  inst.features = doc.at("features").get<FeatureMatrix>();
  inst.labels = labels_from_json(doc.at("labels"));
  inst.labels.validate(inst.features.size());
  return inst;
}

std::vector<SelectionInstance> load_instances(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<SelectionInstance> out;
  std::string line;
  int line_no = 0;
  std::optional<std::size_t> dim;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    SelectionInstance inst;
    try {
      inst = instance_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": malformed instance: " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    for (const auto& row : inst.features) {
      if (!dim) dim = row.size();
      if (row.size() != *dim) {
        throw InputError("feature dimension mismatch in instance " + inst.question_id + " (line " +
                         std::to_string(line_no) + "): expected " + std::to_string(*dim) + ", got " +
                         std::to_string(row.size()));
      }
    }
    out.push_back(std::move(inst));
  }
  return out;
}

namespace {

std::string params_fingerprint(const PolicyParams& params, const WifParams& wif) {
  json body = {{"weights", params.weights}, {"bias", params.bias}, {"wif_params", wif_params_to_json(wif)}};
  return text::hex64(text::fnv1a64(body.dump()));
}

}  // namespace

json policy_to_json(const PolicyParams& params, const WifParams& wif) {
  return {{"dim", params.dim()},
          {"weights", params.weights},
          {"bias", params.bias},
          {"wif_params", wif_params_to_json(wif)},
          {"fingerprint", params_fingerprint(params, wif)}};
}

PolicyParams policy_from_json(const json& doc, WifParams* wif) {
  try {
    PolicyParams params{doc.at("weights").get<std::vector<double>>(), doc.at("bias").get<double>()};
    if (doc.at("dim").get<std::size_t>() != params.dim()) throw InputError("policy dim does not match weights");
    auto w = doc.contains("wif_params") ? wif_params_from_json(doc["wif_params"]) : WifParams{};
    if (doc.contains("fingerprint") && doc["fingerprint"].get<std::string>() != params_fingerprint(params, w)) {
      throw InputError("policy fingerprint mismatch");
    }
    for (double v : params.weights) {
      if (!std::isfinite(v)) throw InputError("policy has non-finite weights");
    }
    if (wif) *wif = w;
    return params;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed policy: ") + e.what());
  }
}

void save_policy(const PolicyParams& params, const WifParams& wif, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << policy_to_json(params, wif).dump(2) << '\n';
}

PolicyParams load_policy(const std::filesystem::path& path, WifParams* wif) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read policy " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return policy_from_json(json::parse(ss.str()), wif);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

}  // namespace grouprag::policy
