#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace grouprag::text {

/// Lowercases ASCII letters and splits on every byte that is not an ASCII
/// letter or digit. Bytes >= 0x80 are kept inside tokens so UTF-8 words
/// survive intact. No stemming, no stopword removal.
std::vector<std::string> tokenize(std::string_view text);

/// Splits on ASCII whitespace only; tokens keep their original spelling.
std::vector<std::string> split_whitespace(std::string_view text);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

bool is_stopword(std::string_view token);

/// Bag-of-tokens F1 between two strings (SQuAD-style): overlap counts each
/// shared token min(count_a, count_b) times. Two empty token lists give 1.
double token_f1(std::string_view a, std::string_view b);

/// Jaccard similarity of the token sets of two strings; 0 when both empty.
double token_jaccard(std::string_view a, std::string_view b);

/// The `n` highest-frequency non-stopword tokens of `text`, ties broken by
/// ascending token.
std::vector<std::string> top_terms(std::string_view text, std::size_t n);

/// 64-bit FNV-1a; used for fingerprints and seed derivation.
std::uint64_t fnv1a64(std::string_view data);

std::string hex64(std::uint64_t value);

/// One round of SplitMix64 (Steele et al.) for deriving sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace grouprag::text
