#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace grouprag::retrieval {

struct ChunkingConfig {
  int max_tokens = 256;
  int overlap_tokens = 32;

  void validate() const;
  friend bool operator==(const ChunkingConfig&, const ChunkingConfig&) = default;
};

struct Chunk {
  std::string id;      // "<doc_id>:<ordinal within doc>"
  std::string doc_id;
  std::string text;
  int token_count = 0;  // whitespace tokens

  friend bool operator==(const Chunk&, const Chunk&) = default;
};

struct Corpus {
  std::vector<Chunk> chunks;
  ChunkingConfig chunking;
  std::size_t skipped_documents = 0;  // documents with zero tokens
  std::vector<std::string> warnings;
};

struct Hit {
  std::string chunk_id;
  double score = 0.0;

  friend bool operator==(const Hit&, const Hit&) = default;
};

/// Ranked retrieval result. Entries are sorted by score descending with ties
/// broken by ascending chunk id, and every score is strictly positive.
struct RankedHits {
  std::vector<Hit> entries;
  std::string query;
  int k = 0;

  bool empty() const noexcept { return entries.empty(); }
  friend bool operator==(const RankedHits&, const RankedHits&) = default;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;

  friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

/// Splits one document into overlapping whitespace-token windows. Windows
/// advance by `max_tokens - overlap_tokens` and the last window ends exactly at
/// the final token. Returns an empty vector for documents without tokens.
std::vector<Chunk> chunk_document(const std::string& doc_id, std::string_view text,
                                  const ChunkingConfig& config);

/// Reads a corpus from a directory of .txt / .jsonl files (sorted by file
/// name) or from a single such file. A .txt file is one document whose id is
/// the file stem; .jsonl lines are {"id", "text"} records.
Corpus ingest_corpus(const std::filesystem::path& source, const ChunkingConfig& config);

/// Immutable BM25 inverted index. Safe for concurrent `retrieve` calls.
class Index {
 public:
  Index() = default;

  const std::vector<Chunk>& chunks() const noexcept { return chunks_; }
  const ChunkingConfig& chunking() const noexcept { return chunking_; }
  const Bm25Params& params() const noexcept { return params_; }
  std::size_t size() const noexcept { return chunks_.size(); }
  std::size_t vocabulary_size() const noexcept { return postings_.size(); }
  double average_length() const noexcept { return avg_length_; }

  /// Sorted vocabulary; convenient for tests and summaries.
  std::vector<std::string> vocabulary() const;

  std::size_t document_frequency(const std::string& term) const;
  const Chunk* find(std::string_view chunk_id) const;

  /// Top-k chunks by BM25. Only chunks with a positive score are returned.
  /// Throws InputError when k < 1 or the query has no tokens.
  RankedHits retrieve(std::string_view query, int k) const;

  friend Index build_index(const Corpus& corpus, Bm25Params params);
  friend bool operator==(const Index&, const Index&) = default;

 private:
  struct Posting {
    std::uint32_t chunk = 0;
    std::uint32_t tf = 0;
    friend bool operator==(const Posting&, const Posting&) = default;
  };

  std::vector<Chunk> chunks_;
  ChunkingConfig chunking_;
  Bm25Params params_;
  std::vector<std::uint32_t> lengths_;  // normalized-token length per chunk
  std::map<std::string, std::vector<Posting>> postings_;
  std::unordered_map<std::string, std::uint32_t> id_to_ordinal_;
  double avg_length_ = 0.0;
};

Index build_index(const Corpus& corpus, Bm25Params params = {});

/// Jaccard similarity of the chunk-id sets of two hit lists; 0 if both empty.
double retrieval_overlap(const RankedHits& a, const RankedHits& b);

inline constexpr std::string_view kIndexFormat = "grouprag-index-v1";

nlohmann::json index_to_json(const Index& index);
Index index_from_json(const nlohmann::json& doc);
void save_index(const Index& index, const std::filesystem::path& path);
Index load_index(const std::filesystem::path& path);

nlohmann::json hits_to_json(const RankedHits& hits);
RankedHits hits_from_json(const nlohmann::json& doc);

}  // namespace grouprag::retrieval
