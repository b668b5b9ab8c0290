#include "grouprag/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "grouprag/error.hpp"
#include "grouprag/text.hpp"

namespace grouprag::retrieval {

namespace fs = std::filesystem;
using nlohmann::json;

void ChunkingConfig::validate() const {
  if (max_tokens < 1) throw InputError("chunking: max_tokens must be >= 1");
  if (overlap_tokens < 0 || overlap_tokens >= max_tokens) {
    throw InputError("chunking: overlap_tokens must satisfy 0 <= overlap < max_tokens");
  }
}

std::vector<Chunk> chunk_document(const std::string& doc_id, std::string_view text,
                                  const ChunkingConfig& config) {
  config.validate();
  auto tokens = text::split_whitespace(text);
  std::vector<Chunk> chunks;
  if (tokens.empty()) return chunks;

  const std::size_t window = static_cast<std::size_t>(config.max_tokens);
  const std::size_t stride = window - static_cast<std::size_t>(config.overlap_tokens);
  for (std::size_t start = 0;; start += stride) {
    std::size_t end = std::min(start + window, tokens.size());
    std::vector<std::string> slice(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(end));
    Chunk chunk;
    chunk.id = doc_id + ":" + std::to_string(chunks.size());
    chunk.doc_id = doc_id;
    chunk.text = text::join(slice, " ");
    chunk.token_count = static_cast<int>(slice.size());
    chunks.push_back(std::move(chunk));
    if (end == tokens.size()) break;
  }
  return chunks;
}

namespace {

struct Document {
  std::string id;
  std::string text;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void read_jsonl_documents(const fs::path& path, std::vector<Document>& out) {
  std::istringstream lines(slurp(path));
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!record.is_object() || !record.contains("id") || !record.contains("text") ||
        !record["text"].is_string()) {
      throw InputError(path.string() + ":" + std::to_string(line_no) +
                       ": expected {\"id\": string, \"text\": string}");
    }
    const auto& id = record["id"];
    out.push_back({id.is_string() ? id.get<std::string>() : id.dump(), record["text"].get<std::string>()});
  }
}

void read_source_file(const fs::path& path, std::vector<Document>& out, std::vector<std::string>& warnings) {
  auto ext = path.extension().string();
  if (ext == ".txt") {
    out.push_back({path.stem().string(), slurp(path)});
  } else if (ext == ".jsonl") {
    read_jsonl_documents(path, out);
  } else {
    warnings.push_back("ignored " + path.string() + " (not .txt or .jsonl)");
  }
}

}  // namespace

Corpus ingest_corpus(const fs::path& source, const ChunkingConfig& config) {
  config.validate();
  if (!fs::exists(source)) throw InputError("corpus path does not exist: " + source.string());

  Corpus corpus;
  corpus.chunking = config;

  std::vector<Document> documents;
  if (fs::is_directory(source)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(source)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) read_source_file(f, documents, corpus.warnings);
  } else {
    read_source_file(source, documents, corpus.warnings);
  }

  std::set<std::string> seen;
  for (const auto& doc : documents) {
    if (!seen.insert(doc.id).second) throw InputError("duplicate document id: " + doc.id);
    auto chunks = chunk_document(doc.id, doc.text, config);
    if (chunks.empty()) {
      ++corpus.skipped_documents;
      corpus.warnings.push_back("skipped document without tokens: " + doc.id);
      continue;
    }
    for (auto& c : chunks) corpus.chunks.push_back(std::move(c));
  }
  if (documents.empty()) corpus.warnings.push_back("no documents found under " + source.string());
  return corpus;
}

Index build_index(const Corpus& corpus, Bm25Params params) {
  Index index;
  index.chunks_ = corpus.chunks;
  index.chunking_ = corpus.chunking;
  index.params_ = params;
  index.lengths_.reserve(corpus.chunks.size());

  std::uint64_t total = 0;
  for (std::uint32_t ordinal = 0; ordinal < corpus.chunks.size(); ++ordinal) {
    const auto& chunk = corpus.chunks[ordinal];
    if (!index.id_to_ordinal_.emplace(chunk.id, ordinal).second) {
      throw InputError("duplicate chunk id: " + chunk.id);
    }
    auto tokens = text::tokenize(chunk.text);
    std::map<std::string, std::uint32_t> tf;
    for (auto& t : tokens) ++tf[t];
    for (auto& [term, count] : tf) index.postings_[term].push_back({ordinal, count});
    index.lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
    total += tokens.size();
  }
  index.avg_length_ =
      corpus.chunks.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(corpus.chunks.size());
  return index;
}

std::vector<std::string> Index::vocabulary() const {
  std::vector<std::string> vocab;
  vocab.reserve(postings_.size());
  for (const auto& [term, _] : postings_) vocab.push_back(term);
  return vocab;
}

std::size_t Index::document_frequency(const std::string& term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? 0 : it->second.size();
}

const Chunk* Index::find(std::string_view chunk_id) const {
  auto it = id_to_ordinal_.find(std::string(chunk_id));
  return it == id_to_ordinal_.end() ? nullptr : &chunks_[it->second];
}

RankedHits Index::retrieve(std::string_view query, int k) const {
  if (k < 1) throw InputError("retrieve: k must be >= 1");
  auto tokens = text::tokenize(query);
  if (tokens.empty()) throw InputError("retrieve: query has no tokens after normalization");
  std::set<std::string> terms(tokens.begin(), tokens.end());

  RankedHits hits;
  hits.query = std::string(query);
  hits.k = k;
  if (chunks_.empty()) return hits;

  const double n = static_cast<double>(chunks_.size());
  const double k1 = params_.k1;
  const double b = params_.b;
  std::vector<double> scores(chunks_.size(), 0.0);
  for (const auto& term : terms) {
    auto it = postings_.find(term);
    if (it == postings_.end()) continue;
    const double df = static_cast<double>(it->second.size());
    const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    for (const auto& posting : it->second) {
      const double tf = posting.tf;
      const double len = lengths_[posting.chunk];
      const double norm = k1 * (1.0 - b + b * len / avg_length_);
      scores[posting.chunk] += idf * (tf * (k1 + 1.0)) / (tf + norm);
    }
  }

  std::vector<std::uint32_t> candidates;
  for (std::uint32_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > 0.0) candidates.push_back(i);
  }
  auto better = [&](std::uint32_t x, std::uint32_t y) {
    if (scores[x] != scores[y]) return scores[x] > scores[y];
    return chunks_[x].id < chunks_[y].id;
  };
  const std::size_t take = std::min(candidates.size(), static_cast<std::size_t>(k));
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                    candidates.end(), better);
  for (std::size_t i = 0; i < take; ++i) {
    hits.entries.push_back({chunks_[candidates[i]].id, scores[candidates[i]]});
  }
  return hits;
}

double retrieval_overlap(const RankedHits& a, const RankedHits& b) {
  std::set<std::string> sa, sb;
  for (const auto& h : a.entries) sa.insert(h.chunk_id);
  for (const auto& h : b.entries) sb.insert(h.chunk_id);
  if (sa.empty() && sb.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& id : sa) inter += sb.count(id);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

// Persistence ------------------------------------------------------------------

json index_to_json(const Index& index) {
  json chunks = json::array();
  for (const auto& c : index.chunks()) {
    chunks.push_back({{"id", c.id}, {"doc_id", c.doc_id}, {"text", c.text}, {"token_count", c.token_count}});
  }
  return {
      {"format", kIndexFormat},
      {"chunking", {{"max_tokens", index.chunking().max_tokens}, {"overlap_tokens", index.chunking().overlap_tokens}}},
      {"bm25", {{"k1", index.params().k1}, {"b", index.params().b}}},
      {"stats", {{"chunks", index.size()}, {"vocabulary", index.vocabulary_size()}}},
      {"chunks", std::move(chunks)},
  };
}

Index index_from_json(const json& doc) {
  if (!doc.is_object() || doc.value("format", "") != kIndexFormat) {
    throw InputError("not a " + std::string(kIndexFormat) + " index file");
  }
  try {
    Corpus corpus;
    corpus.chunking.max_tokens = doc.at("chunking").at("max_tokens").get<int>();
    corpus.chunking.overlap_tokens = doc.at("chunking").at("overlap_tokens").get<int>();
    for (const auto& c : doc.at("chunks")) {
      corpus.chunks.push_back({c.at("id").get<std::string>(), c.at("doc_id").get<std::string>(),
                               c.at("text").get<std::string>(), c.at("token_count").get<int>()});
    }
    Bm25Params params{doc.at("bm25").at("k1").get<double>(), doc.at("bm25").at("b").get<double>()};
    Index index = build_index(corpus, params);
    const auto& stats = doc.at("stats");
    if (stats.at("chunks").get<std::size_t>() != index.size() ||
        stats.at("vocabulary").get<std::size_t>() != index.vocabulary_size()) {
      throw InputError("index file statistics do not match its chunks");
    }
    return index;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed index file: ") + e.what());
  }
}

void save_index(const Index& index, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << index_to_json(index).dump() << '\n';
}

Index load_index(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(slurp(path));
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return index_from_json(doc);
}

json hits_to_json(const RankedHits& hits) {
  json entries = json::array();
  for (const auto& h : hits.entries) entries.push_back({{"chunk_id", h.chunk_id}, {"score", h.score}});
  return {{"query", hits.query}, {"k", hits.k}, {"entries", std::move(entries)}};
}

RankedHits hits_from_json(const json& doc) {
  RankedHits hits;
  hits.query = doc.at("query").get<std::string>();
  hits.k = doc.at("k").get<int>();
  for (const auto& e : doc.at("entries")) {
    hits.entries.push_back({e.at("chunk_id").get<std::string>(), e.at("score").get<double>()});
  }
  return hits;
}

}  // namespace grouprag::retrieval
