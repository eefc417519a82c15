#pragma once

#include "attnwb/common.hpp"

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace attnwb {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr std::size_t kNumReserved = 4;

// Markers and padding. UNK is an ordinary token for frequency purposes.
inline bool is_special(TokenId t) { return t == kPad || t == kBos || t == kEos; }

class Vocab {
 public:
  // Only the four reserved tokens.
  Vocab();
  // `tokens` in id order; the first four must be the reserved names.
  static Vocab from_tokens(std::vector<std::string> tokens);

  // UNK for tokens that are not present.
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return itos_.size(); }
  const std::vector<std::string>& tokens() const { return itos_; }

  static const std::vector<std::string>& reserved();

 private:
  explicit Vocab(std::vector<std::string> tokens);

  std::vector<std::string> itos_;
  std::unordered_map<std::string, TokenId> stoi_;
};

// Half-open [start, end) range into Document::flat.
struct Span {
  int start = 0;
  int end = 0;
  int size() const { return end - start; }
  bool operator==(const Span&) const = default;
};

struct RawDocument {
  std::string id;
  std::vector<std::string> sentences;
  std::vector<std::string> summary;
};

struct Document {
  std::string id;
  std::vector<std::vector<TokenId>> sentences;
  // Sentences wrapped in BOS/EOS and concatenated.
  std::vector<TokenId> flat;
  std::vector<Span> spans;
  std::vector<std::vector<TokenId>> gold_summary;
  // One bit per sentence; empty when labels have not been computed.
  std::vector<int> oracle_labels;

  // Number of non-PAD positions.
  int length() const { return spans.empty() ? 0 : spans.back().end; }
  std::vector<int> bos_positions() const;
  std::vector<TokenId> gold_tokens() const;
  // Throws if the structural invariants do not hold.
  void check() const;
};

struct Dataset {
  std::string split;
  std::vector<Document> docs;
  std::shared_ptr<const Vocab> vocab;
  int truncation = 128;

  const Document& find(std::string_view id) const;
};

struct SynthConfig {
  int n_docs = 100;
  int sents_per_doc = 6;
  int tokens_per_sent = 8;
  int vocab_size = 500;
  bool repeat_signal = true;
  int summary_sents = 2;
  int truncation = 128;
  int oracle_max_sents = 3;
};

// Generated documents plus the vocabulary they were drawn from.
struct SynthCorpus {
  Vocab vocab;
  std::vector<RawDocument> docs;
};

namespace corpus {

// Lowercased whitespace tokenization.
std::vector<std::string> tokenize(std::string_view text);

Vocab build_vocab(std::span<const RawDocument> corpus, std::size_t max_size);

Document encode_document(const RawDocument& raw, const Vocab& vocab, int max_len);

RawDocument decode_document(const Document& doc, const Vocab& vocab);

std::string decode(std::span<const TokenId> ids, const Vocab& vocab);

SynthCorpus synth_raw(const SynthConfig& config, std::uint64_t seed);

// Encodes synth_raw output and fills oracle labels.
Dataset synth_generate(const SynthConfig& config, std::uint64_t seed);

// Encodes raw documents and fills oracle labels with rouge::greedy_oracle.
Dataset make_dataset(std::string split, std::span<const RawDocument> raw,
                     std::shared_ptr<const Vocab> vocab, int truncation,
                     int oracle_max_sents);

std::vector<RawDocument> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const RawDocument> docs);
Vocab read_vocab(const std::filesystem::path& path);
void write_vocab(const std::filesystem::path& path, const Vocab& vocab);

}  // namespace corpus
}  // namespace attnwb
