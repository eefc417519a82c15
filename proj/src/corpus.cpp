#include "attnwb/corpus.hpp"

#include "attnwb/rouge.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace attnwb {

using nlohmann::json;

Vocab::Vocab() : Vocab(from_tokens(reserved())) {}

const std::vector<std::string>& Vocab::reserved() {
  static const std::vector<std::string> names{"[PAD]", "[UNK]", "[BOS]", "[EOS]"};
  return names;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  const auto& names = reserved();
  if (tokens.size() < names.size() || !std::equal(names.begin(), names.end(), tokens.begin()))
    throw Error("vocab must start with [PAD], [UNK], [BOS], [EOS]");
  return Vocab(std::move(tokens));
}

Vocab::Vocab(std::vector<std::string> tokens) : itos_(std::move(tokens)) {
  for (std::size_t i = 0; i < itos_.size(); ++i) {
    if (!stoi_.emplace(itos_[i], static_cast<TokenId>(i)).second)
      throw Error("duplicate vocab token '" + itos_[i] + "'");
  }
}

TokenId Vocab::id(std::string_view token) const {
  auto it = stoi_.find(std::string(token));
  return it == stoi_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return stoi_.contains(std::string(token)); }

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= itos_.size())
    throw Error("token id " + std::to_string(id) + " outside vocab");
  return itos_[static_cast<std::size_t>(id)];
}

std::vector<int> Document::bos_positions() const {
  std::vector<int> out;
  out.reserve(spans.size());
  for (const auto& s : spans) out.push_back(s.start);
  return out;
}

std::vector<TokenId> Document::gold_tokens() const {
  std::vector<TokenId> out;
  for (const auto& s : gold_summary) out.insert(out.end(), s.begin(), s.end());
  return out;
}

void Document::check() const {
  if (spans.size() != sentences.size()) throw Error(id + ": one span per sentence required");
  int cursor = 0;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const Span& sp = spans[s];
    if (sp.start != cursor || sp.end <= sp.start + 1 ||
        sp.end > static_cast<int>(flat.size()))
      throw Error(id + ": spans must be ordered, disjoint and contiguous");
    if (flat[sp.start] != kBos || flat[sp.end - 1] != kEos)
      throw Error(id + ": span must start with BOS and end with EOS");
    if (sp.size() != static_cast<int>(sentences[s].size()) + 2)
      throw Error(id + ": span length disagrees with sentence");
    cursor = sp.end;
  }
  for (std::size_t i = static_cast<std::size_t>(cursor); i < flat.size(); ++i)
    if (flat[i] != kPad) throw Error(id + ": tokens outside spans must be PAD");
  if (!oracle_labels.empty() && oracle_labels.size() != sentences.size())
    throw Error(id + ": one oracle label per sentence required");
}

const Document& Dataset::find(std::string_view id) const {
  for (const auto& d : docs)
    if (d.id == id) return d;
  throw Error("unknown document '" + std::string(id) + "'");
}

namespace corpus {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab build_vocab(std::span<const RawDocument> corpus, std::size_t max_size) {
  if (max_size < kNumReserved + 1) throw Error("max_size must be at least 5");
  std::map<std::string, long> counts;
  auto add = [&](const std::string& text) {
    for (auto& tok : tokenize(text)) ++counts[tok];
  };
  for (const auto& doc : corpus) {
    for (const auto& s : doc.sentences) add(s);
    for (const auto& s : doc.summary) add(s);
  }
  for (const auto& name : Vocab::reserved()) counts.erase(name);
  if (counts.empty()) throw Error("empty corpus");

  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  // std::map iteration is lexicographic, so a stable sort on count keeps the tie-break.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = Vocab::reserved();
  for (const auto& [tok, n] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(tok);
  }
  return Vocab::from_tokens(std::move(tokens));
}

Document encode_document(const RawDocument& raw, const Vocab& vocab, int max_len) {
  if (raw.sentences.empty()) throw Error(raw.id + ": document has no sentences");
  Document doc;
  doc.id = raw.id;
  for (const auto& s : raw.sentences) {
    std::vector<TokenId> ids;
    for (const auto& tok : tokenize(s)) ids.push_back(vocab.id(tok));
    const int cost = static_cast<int>(ids.size()) + 2;
    if (static_cast<int>(doc.flat.size()) + cost > max_len) break;
    const int start = static_cast<int>(doc.flat.size());
    doc.flat.push_back(kBos);
    doc.flat.insert(doc.flat.end(), ids.begin(), ids.end());
    doc.flat.push_back(kEos);
    doc.spans.push_back({start, static_cast<int>(doc.flat.size())});
    doc.sentences.push_back(std::move(ids));
  }
  if (doc.sentences.empty()) throw Error("document exceeds truncation");
  for (const auto& s : raw.summary) {
    std::vector<TokenId> ids;
    for (const auto& tok : tokenize(s)) ids.push_back(vocab.id(tok));
    doc.gold_summary.push_back(std::move(ids));
  }
  return doc;
}

std::string decode(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

RawDocument decode_document(const Document& doc, const Vocab& vocab) {
  RawDocument raw;
  raw.id = doc.id;
  for (const auto& s : doc.sentences) raw.sentences.push_back(decode(s, vocab));
  for (const auto& s : doc.gold_summary) raw.summary.push_back(decode(s, vocab));
  return raw;
}

SynthCorpus synth_raw(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.n_docs < 1 || cfg.sents_per_doc < 1 || cfg.tokens_per_sent < 1)
    throw Error("synth counts must be at least 1");
  if (cfg.vocab_size < static_cast<int>(kNumReserved) + 1)
    throw Error("synth vocab_size must exceed the reserved tokens");
  if (cfg.repeat_signal && cfg.sents_per_doc < 2 && cfg.tokens_per_sent < 2)
    throw Error("repeat_signal needs at least two token slots per document");

  std::vector<std::string> tokens = Vocab::reserved();
  const int n_content = cfg.vocab_size - static_cast<int>(kNumReserved);
  for (int i = 0; i < n_content; ++i) tokens.push_back("w" + std::to_string(i));
  SynthCorpus out{Vocab::from_tokens(std::move(tokens)), {}};

  const int n_sents = cfg.sents_per_doc;
  const int n_tok = cfg.tokens_per_sent;
  const int n_summary = std::clamp(cfg.summary_sents, 1, n_sents);
  const int n_keys = std::min(3, n_tok);

  Rng rng(seed);
  out.docs.reserve(static_cast<std::size_t>(cfg.n_docs));
  for (int d = 0; d < cfg.n_docs; ++d) {
    RawDocument raw;
    raw.id = "d" + std::to_string(d);

    std::vector<int> keys;
    if (cfg.repeat_signal) {
      while (static_cast<int>(keys.size()) < std::min(n_keys, n_content)) {
        int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_content)));
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
      }
    }
    // Background tokens avoid the keys so planted counts stay exact.
    auto background = [&] {
      for (;;) {
        int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_content)));
        if (n_content <= static_cast<int>(keys.size()) ||
            std::find(keys.begin(), keys.end(), t) == keys.end())
          return t;
      }
    };

    std::vector<int> order(static_cast<std::size_t>(n_sents));
    for (int s = 0; s < n_sents; ++s) order[static_cast<std::size_t>(s)] = s;
    shuffle(order, rng);
    std::vector<bool> is_summary(static_cast<std::size_t>(n_sents), false);
    for (int i = 0; i < n_summary; ++i) is_summary[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

    std::vector<std::vector<int>> sents(static_cast<std::size_t>(n_sents));
    for (int s = 0; s < n_sents; ++s) {
      auto& sent = sents[static_cast<std::size_t>(s)];
      for (int t = 0; t < n_tok; ++t) sent.push_back(background());
      if (!cfg.repeat_signal) continue;
      std::vector<int> slots(static_cast<std::size_t>(n_tok));
      for (int t = 0; t < n_tok; ++t) slots[static_cast<std::size_t>(t)] = t;
      shuffle(slots, rng);
      if (is_summary[static_cast<std::size_t>(s)]) {
        for (std::size_t k = 0; k < keys.size(); ++k) sent[static_cast<std::size_t>(slots[k])] = keys[k];
      } else if (n_summary >= 2 && keys.size() >= 2 && rng.uniform() < 0.5) {
        sent[static_cast<std::size_t>(slots[0])] = keys[rng.below(keys.size())];
      }
    }
    if (cfg.repeat_signal && n_summary == 1) {
      // A single summary sentence still needs its first key repeated somewhere.
      if (n_sents >= 2) {
        sents[static_cast<std::size_t>(order[1])][0] = keys[0];
      } else {
        auto& sent = sents[0];
        auto other = std::find_if(sent.begin(), sent.end(), [&](int t) { return t != keys[0]; });
        if (other == sent.end()) other = sent.begin() + 1;
        *other = keys[0];
      }
    }

    for (int s = 0; s < n_sents; ++s) {
      std::string text;
      for (int t : sents[static_cast<std::size_t>(s)]) {
        if (!text.empty()) text.push_back(' ');
        text += "w" + std::to_string(t);
      }
      raw.sentences.push_back(text);
      if (is_summary[static_cast<std::size_t>(s)]) raw.summary.push_back(text);
    }
    out.docs.push_back(std::move(raw));
  }
  return out;
}

Dataset make_dataset(std::string split, std::span<const RawDocument> raw,
                     std::shared_ptr<const Vocab> vocab, int truncation,
                     int oracle_max_sents) {
  Dataset ds;
  ds.split = std::move(split);
  ds.vocab = std::move(vocab);
  ds.truncation = truncation;
  ds.docs.reserve(raw.size());
  for (const auto& r : raw) {
    Document doc = encode_document(r, *ds.vocab, truncation);
    doc.oracle_labels = rouge::greedy_oracle(doc, oracle_max_sents);
    ds.docs.push_back(std::move(doc));
  }
  return ds;
}

Dataset synth_generate(const SynthConfig& config, std::uint64_t seed) {
  SynthCorpus sc = synth_raw(config, seed);
  auto vocab = std::make_shared<const Vocab>(std::move(sc.vocab));
  return make_dataset("synth", sc.docs, std::move(vocab), config.truncation,
                      config.oracle_max_sents);
}

std::vector<RawDocument> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file " + path.string());
  std::vector<RawDocument> docs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      RawDocument d;
      d.id = j.at("id").get<std::string>();
      d.sentences = j.at("sentences").get<std::vector<std::string>>();
      d.summary = j.value("summary", std::vector<std::string>{});
      docs.push_back(std::move(d));
    } catch (const json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

void write_jsonl(const std::filesystem::path& path, std::span<const RawDocument> docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& d : docs) {
    json j;
    j["id"] = d.id;
    j["sentences"] = d.sentences;
    j["summary"] = d.summary;
    out << j.dump() << '\n';
  }
}

Vocab read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocab file " + path.string());
  try {
    json j = json::parse(in);
    return Vocab::from_tokens(j.at("tokens").get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

void write_vocab(const std::filesystem::path& path, const Vocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  json j;
  j["tokens"] = vocab.tokens();
  out << j.dump() << '\n';
}

}  // namespace corpus
}  // namespace attnwb
