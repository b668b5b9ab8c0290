#pragma once

#include <random>
#include <string>
#include <vector>

#include "grouprag/wif_policy.hpp"

namespace testing {

/// Separable selection instances: feature 0 flags Core conclusions, feature 1
/// flags Noise, Support has neither; the remaining features are uniform
/// distractors. Every instance has at least one conclusion of each role, so
/// the best achievable WIF is 1 + gamma everywhere.
inline std::vector<grouprag::policy::SelectionInstance> separable_instances(int count, std::uint64_t seed,
                                                                            std::size_t dim = 8) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<grouprag::policy::SelectionInstance> out;
  for (int q = 0; q < count; ++q) {
    grouprag::policy::SelectionInstance inst;
    inst.question_id = "syn" + std::to_string(q);
    const int n = 3 + static_cast<int>(rng() % 6);
    std::vector<int> roles(static_cast<std::size_t>(n));
    roles[0] = 0;
    roles[1] = 1;
    roles[2] = 2;
    for (int i = 3; i < n; ++i) roles[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 3);
    std::shuffle(roles.begin(), roles.end(), rng);
    for (int i = 0; i < n; ++i) {
      std::vector<double> row(dim, 0.0);
      const int role = roles[static_cast<std::size_t>(i)];
      row[0] = role == 0 ? 1.0 : 0.0;
      row[1] = role == 2 ? 1.0 : 0.0;
      for (std::size_t j = 2; j < dim; ++j) row[j] = unit(rng);
      inst.features.push_back(std::move(row));
      (role == 0 ? inst.labels.core : role == 1 ? inst.labels.support : inst.labels.noise).insert(i);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace testing
