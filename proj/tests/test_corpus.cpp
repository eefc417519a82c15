#include "doctest.h"
#include "helpers.hpp"

#include <filesystem>
#include <map>

using namespace attnwb;
using namespace testutil;

namespace {

std::vector<RawDocument> one(const std::string& text) { return {RawDocument{"x", {text}, {}}}; }

}  // namespace

TEST_CASE("build_vocab") {
  SUBCASE("frequency order") {
    const Vocab v = corpus::build_vocab(one("a a b"), 6);
    REQUIRE(v.size() == 6);
    CHECK(v.token(4) == "a");
    CHECK(v.token(5) == "b");
  }
  SUBCASE("single token") {
    const Vocab v = corpus::build_vocab(one("x"), 5);
    CHECK(v.size() == 5);
    CHECK(v.contains("x"));
  }
  SUBCASE("lexicographic tie-break and lowercasing") {
    const Vocab v = corpus::build_vocab(one("B a"), 10);
    CHECK(v.id("a") < v.id("b"));
    CHECK(!v.contains("B"));
  }
  SUBCASE("reserved ids and inverse maps") {
    const Vocab v = corpus::build_vocab(one("q r s t q"), 100);
    CHECK(v.id("[PAD]") == kPad);
    CHECK(v.id("[UNK]") == kUnk);
    CHECK(v.id("[BOS]") == kBos);
    CHECK(v.id("[EOS]") == kEos);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
  }
  SUBCASE("errors") {
    CHECK_THROWS_WITH(corpus::build_vocab(one("a"), 4), doctest::Contains("at least 5"));
    CHECK_THROWS_WITH(corpus::build_vocab(std::vector<RawDocument>{}, 10), "empty corpus");
    CHECK_THROWS_WITH(corpus::build_vocab(one("   "), 10), "empty corpus");
  }
}

TEST_CASE("encode_document") {
  const auto vocab = vocab_of({"cat sat x y z"});
  SUBCASE("markers and spans") {
    const Document d = corpus::encode_document({"d", {"Cat sat"}, {}}, *vocab, 10);
    CHECK(d.flat == std::vector<TokenId>{kBos, vocab->id("cat"), vocab->id("sat"), kEos});
    REQUIRE(d.spans.size() == 1);
    CHECK(d.spans[0] == Span{0, 4});
  }
  SUBCASE("unknown tokens") {
    const Document d = corpus::encode_document({"d", {"cat dog"}, {}}, *vocab, 10);
    CHECK(d.flat[2] == kUnk);
  }
  SUBCASE("truncation keeps whole sentences") {
    const Document d = corpus::encode_document({"d", {"x y", "x z", "y z"}, {}}, *vocab, 9);
    CHECK(d.sentences.size() == 2);
    CHECK(d.length() == 8);
    d.check();
  }
  SUBCASE("everything truncated") {
    CHECK_THROWS_WITH(corpus::encode_document({"d", {"x y z cat"}, {}}, *vocab, 4), "document exceeds truncation");
  }
}

TEST_CASE("synthetic generator") {
  SynthConfig c;
  c.n_docs = 100;
  c.vocab_size = 60;
  const Dataset a = corpus::synth_generate(c, 5);
  const Dataset b = corpus::synth_generate(c, 5);
  CHECK(a.docs.size() == 100);
  for (std::size_t i = 0; i < a.docs.size(); ++i) {
    CHECK(a.docs[i].flat == b.docs[i].flat);
    CHECK(a.docs[i].gold_summary == b.docs[i].gold_summary);
    CHECK(a.docs[i].oracle_labels == b.docs[i].oracle_labels);
  }
  for (const auto& d : a.docs) {
    d.check();
    std::map<TokenId, int> counts;
    for (TokenId t : d.flat)
      if (!is_special(t)) ++counts[t];
    bool repeated = false;
    for (const auto& [t, n] : counts) repeated = repeated || n > 1;
    CHECK(repeated);
    CHECK(d.oracle_labels.size() == d.sentences.size());
    CHECK(d.gold_summary.size() == 2);
  }
  SynthConfig tiny = c;
  tiny.vocab_size = 4;
  CHECK_THROWS(corpus::synth_generate(tiny, 1));
  SynthConfig single = c;
  single.summary_sents = 1;
  for (const auto& d : corpus::synth_generate(single, 3).docs) {
    std::map<TokenId, int> counts;
    for (TokenId t : d.flat)
      if (!is_special(t)) ++counts[t];
    bool repeated = false;
    for (const auto& [t, n] : counts) repeated = repeated || n > 1;
    CHECK(repeated);
  }
}

TEST_CASE("document invariants hold on generated data") {
  const Dataset ds = synth(50, 9, 5, 6, 30);
  for (const auto& d : ds.docs) {
    int bos = 0, eos = 0;
    for (TokenId t : d.flat) {
      bos += t == kBos;
      eos += t == kEos;
    }
    CHECK(bos == static_cast<int>(d.sentences.size()));
    CHECK(eos == static_cast<int>(d.sentences.size()));
    const RawDocument raw = corpus::decode_document(d, *ds.vocab);
    CHECK(corpus::encode_document(raw, *ds.vocab, ds.truncation).flat == d.flat);
  }
}

TEST_CASE("jsonl and vocab files") {
  const auto dir = std::filesystem::temp_directory_path() / "attnwb_corpus_io";
  std::filesystem::create_directories(dir);
  const std::vector<RawDocument> docs{{"a", {"x y", "z"}, {"x y"}}, {"b", {"q"}, {}}};
  corpus::write_jsonl(dir / "d.jsonl", docs);
  const auto back = corpus::read_jsonl(dir / "d.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].sentences == docs[0].sentences);
  CHECK(back[0].summary == docs[0].summary);
  CHECK(back[1].id == "b");
  const Vocab v = corpus::build_vocab(docs, 20);
  corpus::write_vocab(dir / "v.json", v);
  CHECK(corpus::read_vocab(dir / "v.json").tokens() == v.tokens());
  std::filesystem::remove_all(dir);
}
