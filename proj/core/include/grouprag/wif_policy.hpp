#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace grouprag::policy {

/// Exponents of the Weighted Inference F-score. Must satisfy
/// alpha >= beta > gamma >= 0.
struct WifParams {
  double alpha = 2.5;
  double beta = 2.0;
  double gamma = 0.5;

  void validate() const;
  friend bool operator==(const WifParams&, const WifParams&) = default;
};

enum class Role { core, support, noise };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);  // case-insensitive, throws InputError

/// Role of every conclusion in one instance. The three sets are disjoint and
/// together cover the conclusion ids 0..n-1.
struct RoleLabels {
  std::set<int> core;
  std::set<int> support;
  std::set<int> noise;

  std::size_t size() const noexcept { return core.size() + support.size() + noise.size(); }
  bool contains(int id) const;
  /// Throws InputError unless the sets are disjoint and cover 0..n-1.
  void validate(std::size_t n) const;
  friend bool operator==(const RoleLabels&, const RoleLabels&) = default;
};

/// A selection over n conclusions; element i is 1 when conclusion i is taken.
using Selection = std::vector<std::uint8_t>;

/// R_c^alpha * (1 - R_n)^beta * (1 + gamma * R_s), with R_c = 1 when there is
/// no Core, R_s = R_n = 0 when their sets are empty, and exactly 0 for the
/// empty selection. Throws InputError for ids outside the labels.
double wif_score(const std::set<int>& selection, const RoleLabels& labels, const WifParams& params = {});
double wif_score(const Selection& selection, const RoleLabels& labels, const WifParams& params = {});

inline constexpr double kProbFloor = 1e-6;
inline constexpr double kProbCeil = 1.0 - 1e-6;

/// Logistic selection head: p_i = sigmoid(w . f_i + b).
struct PolicyParams {
  std::vector<double> weights;
  double bias = 0.0;

  static PolicyParams zeros(std::size_t dim) { return {std::vector<double>(dim, 0.0), 0.0}; }
  std::size_t dim() const noexcept { return weights.size(); }
  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

using FeatureMatrix = std::vector<std::vector<double>>;

struct SelectionInstance {
  std::string question_id;
  FeatureMatrix features;  // one row of fixed dimension per conclusion
  RoleLabels labels;

  std::size_t size() const noexcept { return features.size(); }
  friend bool operator==(const SelectionInstance&, const SelectionInstance&) = default;
};

/// Probabilities clamped to [kProbFloor, kProbCeil]. Throws InputError on a
/// feature dimension mismatch.
std::vector<double> selection_probs(const PolicyParams& params, const FeatureMatrix& features);

/// Ids with p >= 0.5; when none qualify, the single most probable id (lowest
/// id on ties). Empty only for empty input.
std::set<int> threshold_select(std::span<const double> probs);

/// K independent Bernoulli draws per position from a seeded mt19937_64.
std::vector<Selection> sample_rollouts(std::span<const double> probs, int rollouts, std::uint64_t seed);

/// sum_{i in P} log p_i + sum_{i not in P} log(1 - p_i)
double log_prob(std::span<const double> probs, const Selection& selection);

/// (R_k - mean) / (population std + epsilon)
std::vector<double> advantages(std::span<const double> rewards, double epsilon = 1e-8);

/// L = -(1/K) sum_k A_k log pi(P_k | x), evaluated at fixed rollouts and
/// advantages.
double policy_loss(const PolicyParams& params, const FeatureMatrix& features,
                   const std::vector<Selection>& rollouts, std::span<const double> advantages);

struct PolicyGradient {
  std::vector<double> weights;
  double bias = 0.0;
};

/// Analytic gradient of policy_loss with advantages held constant. Positions
/// whose raw probability falls outside the clamp contribute nothing, matching
/// the flat clamped loss there.
PolicyGradient policy_gradient(const PolicyParams& params, const FeatureMatrix& features,
                               const std::vector<Selection>& rollouts,
                               std::span<const double> advantages);

struct Rollout {
  Selection selection;
  double reward = 0.0;
  double log_prob = 0.0;
  double advantage = 0.0;
};

struct StepResult {
  PolicyParams params;
  double mean_reward = 0.0;
  std::vector<Rollout> rollouts;
};

/// probs -> rollouts -> WIF rewards -> advantages -> one gradient-descent
/// update. Throws TrainingError on a non-finite gradient.
StepResult policy_gradient_step(const PolicyParams& params, const SelectionInstance& instance,
                                int rollouts, double learning_rate, std::uint64_t seed,
                                const WifParams& wif = {});

struct TrainConfig {
  int rollouts = 8;
  double learning_rate = 0.1;
  int epochs = 1;
  std::uint64_t seed = 0;
  WifParams wif;
};

struct TrainResult {
  PolicyParams params;
  std::vector<double> history;  // mean rollout reward per epoch
};

/// Seeded shuffle per epoch, one step per instance. Starts from zeros.
TrainResult train_policy(const std::vector<SelectionInstance>& dataset, const TrainConfig& config);

/// Mean WIF of K sampled rollouts per instance, averaged over the dataset.
double mean_sampled_wif(const PolicyParams& params, const std::vector<SelectionInstance>& dataset,
                        int rollouts, std::uint64_t seed, const WifParams& wif = {});

/// Mean WIF of the deterministic threshold decision, averaged over the dataset.
double mean_decision_wif(const PolicyParams& params, const std::vector<SelectionInstance>& dataset,
                         const WifParams& wif = {});

// Persistence -----------------------------------------------------------------

nlohmann::json wif_params_to_json(const WifParams& params);
WifParams wif_params_from_json(const nlohmann::json& doc);

nlohmann::json labels_to_json(const RoleLabels& labels);
RoleLabels labels_from_json(const nlohmann::json& doc);

nlohmann::json instance_to_json(const SelectionInstance& instance);
SelectionInstance instance_from_json(const nlohmann::json& doc);

/// Throws InputError naming the line number of a malformed record, or the
/// offending qid when feature dimensions disagree.
std::vector<SelectionInstance> load_instances(const std::filesystem::path& path);

/// {"dim", "weights", "bias", "wif_params", "fingerprint"}
nlohmann::json policy_to_json(const PolicyParams& params, const WifParams& wif);
PolicyParams policy_from_json(const nlohmann::json& doc, WifParams* wif = nullptr);
void save_policy(const PolicyParams& params, const WifParams& wif, const std::filesystem::path& path);
PolicyParams load_policy(const std::filesystem::path& path, WifParams* wif = nullptr);

}  // namespace grouprag::policy
