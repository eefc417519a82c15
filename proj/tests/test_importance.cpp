#include "doctest.h"
#include "helpers.hpp"

#include "attnwb/importance.hpp"
#include "attnwb/patterns.hpp"

#include <cmath>

using namespace attnwb;
using namespace testutil;

namespace {

double score_of(const ImportanceReport& r, const HeadId& id) {
  for (const auto& h : r.heads)
    if (h.head == id) return h.raw;
  FAIL("head missing");
  return 0.0;
}

Dataset subset(const Dataset& ds, std::size_t n) {
  Dataset out = ds;
  out.docs.resize(n);
  return out;
}

double total_loss(const Model& m, const Dataset& ds, const HeadGates& g) {
  double t = 0.0;
  for (const auto& d : ds.docs) t += model::loss(model::forward(m, d, {}, g), d.oracle_labels);
  return t;
}

}  // namespace

TEST_CASE("leave_one_out") {
  const Dataset ds = subset(synth(4, 2, 3, 4, 20), 4);
  const int V = static_cast<int>(ds.vocab->size());
  SUBCASE("manual two-pass subtraction") {
    const Model m = tiny_model(1, 2, 8, V, 4);
    const auto rep = importance::leave_one_out(m, ds, 1);
    const double full = total_loss(m, ds, HeadGates::ones(m));
    CHECK(rep.baseline_loss == doctest::Approx(full).epsilon(1e-12));
    for (const auto& id : m.heads()) {
      HeadGates g = HeadGates::ones(m);
      g.at(id) = 0.0;
      CHECK(std::abs(score_of(rep, id) - (total_loss(m, ds, g) - full)) < 1e-10);
    }
  }
  SUBCASE("zero output projection slice") {
    Model m = tiny_model(1, 2, 8, V, 5);
    m.params.layers[0].wo.middleRows(4, 4).setZero();
    CHECK(score_of(importance::leave_one_out(m, ds), {0, 1, HeadFamily::encoder}) == 0.0);
  }
  SUBCASE("duplicated documents double every score") {
    const Model m = tiny_model(2, 2, 8, V, 6);
    Dataset twice = ds;
    twice.docs.insert(twice.docs.end(), ds.docs.begin(), ds.docs.end());
    const auto a = importance::leave_one_out(m, ds);
    const auto b = importance::leave_one_out(m, twice);
    for (std::size_t h = 0; h < a.heads.size(); ++h) CHECK(b.heads[h].raw == doctest::Approx(2 * a.heads[h].raw).epsilon(1e-12));
  }
  SUBCASE("gate removal equals zeroing the head in the architecture") {
    const Model m = tiny_model(2, 2, 8, V, 7);
    const auto rep = importance::leave_one_out(m, ds);
    const double full = total_loss(m, ds, HeadGates::ones(m));
    for (const auto& id : m.heads()) {
      Model ablated = m;
      ablated.params.layers[static_cast<std::size_t>(id.layer)].wo.middleRows(id.head * 4, 4).setZero();
      CHECK(std::abs(score_of(rep, id) - (total_loss(ablated, ds, HeadGates::ones(m)) - full)) < 1e-6);
    }
  }
  Dataset empty;
  CHECK_THROWS(importance::leave_one_out(tiny_model(1, 1, 4, V, 1), empty));
}

TEST_CASE("sensitivity") {
  const Dataset ds = synth(6, 3, 3, 4, 20);
  const int V = static_cast<int>(ds.vocab->size());
  const Model m = tiny_model(2, 2, 8, V, 8);
  SUBCASE("matches a one-sided finite difference per document") {
    for (const auto& doc : ds.docs) {
      Dataset one = subset(ds, 0);
      one.docs.push_back(doc);
      const auto rep = importance::sensitivity(m, one);
      const double base = total_loss(m, one, HeadGates::ones(m));
      for (const auto& id : m.heads()) {
        HeadGates g = HeadGates::ones(m);
        g.at(id) = 1.0 - 1e-4;
        const double fd = std::abs(total_loss(m, one, g) - base) / 1e-4;
        const double s = score_of(rep, id);
        CHECK(std::abs(s - fd) / std::max({s, fd, 1e-3}) < 1e-3);
      }
    }
  }
  SUBCASE("equals the output-projection identity") {
    // dL/dxi_h at xi = 1 equals the sum of theta * dL/dtheta over the head's Wo rows.
    const auto rep = importance::sensitivity(m, ds);
    for (const auto& id : m.heads()) {
      double expect = 0.0;
      for (const auto& doc : ds.docs) {
        const auto g = model::gradients(m, doc, {}, HeadGates::ones(m), doc.oracle_labels);
        const Mat& w = m.params.layers[id.layer].wo;
        const Mat& gw = g.params.layers[id.layer].wo;
        double s = 0.0;
        for (int r = id.head * 4; r < id.head * 4 + 4; ++r)
          for (int c = 0; c < w.cols(); ++c) s += w(r, c) * gw(r, c);
        expect += std::abs(s);
      }
      CHECK(std::abs(score_of(rep, id) - expect) < 1e-8 * std::max(1.0, expect));
    }
  }
  SUBCASE("absolute value is taken per document") {
    bool mixed = false;
    for (const auto& id : m.heads()) {
      double signed_sum = 0.0, abs_sum = 0.0;
      for (const auto& doc : ds.docs) {
        const double g = model::gradients(m, doc, {}, HeadGates::ones(m), doc.oracle_labels).gates.at(id);
        signed_sum += g;
        abs_sum += std::abs(g);
      }
      CHECK(score_of(importance::sensitivity(m, ds), id) == doctest::Approx(abs_sum).epsilon(1e-12));
      mixed = mixed || std::abs(signed_sum) < abs_sum - 1e-9;
    }
    CHECK(mixed);
  }
  SUBCASE("zero-output head") {
    Model z = m;
    z.params.layers[1].wo.middleRows(0, 4).setZero();
    CHECK(score_of(importance::sensitivity(z, ds), {1, 0, HeadFamily::encoder}) == 0.0);
  }
}

TEST_CASE("taylor") {
  const Dataset ds = synth(5, 4, 3, 4, 20);
  const int V = static_cast<int>(ds.vocab->size());
  const Model m = tiny_model(2, 2, 8, V, 9);
  SUBCASE("matches accumulation over dumped gradients") {
    Params total = m.params.zeros_like();
    for (const auto& doc : ds.docs) {
      const auto g = model::gradients(m, doc, {}, HeadGates::ones(m), doc.oracle_labels);
      std::vector<const Mat*> src;
      visit_params(g.params, [&](const std::string&, const Mat& a) { src.push_back(&a); });
      std::size_t i = 0;
      visit_params(total, [&](const std::string&, Mat& a) { a += *src[i++]; });
    }
    const auto rep = importance::taylor(m, ds);
    for (const auto& id : m.heads()) {
      const auto& T = m.params.layers[id.layer];
      const auto& G = total.layers[id.layer];
      double s = 0.0;
      for (int c = id.head * 4; c < id.head * 4 + 4; ++c) {
        for (int r = 0; r < 8; ++r) s += T.wq(r, c) * G.wq(r, c) + T.wk(r, c) * G.wk(r, c) + T.wv(r, c) * G.wv(r, c);
        s += T.bq(0, c) * G.bq(0, c) + T.bk(0, c) * G.bk(0, c) + T.bv(0, c) * G.bv(0, c);
        for (int k = 0; k < 8; ++k) s += T.wo(c, k) * G.wo(c, k);
      }
      CHECK(std::abs(score_of(rep, id) - s * s) < 1e-8 * std::max(1.0, s * s));
    }
  }
  SUBCASE("all-zero head parameters") {
    Model z = m;
    auto& L = z.params.layers[0];
    for (Mat* w : {&L.wq, &L.wk, &L.wv, &L.bq, &L.bk, &L.bv}) w->middleCols(4, 4).setZero();
    L.wo.middleRows(4, 4).setZero();
    CHECK(score_of(importance::taylor(z, ds), {0, 1, HeadFamily::encoder}) == 0.0);
  }
  SUBCASE("extra zero-contribution heads leave encoder scores unchanged") {
    const Model aug = pal::attach_pals(m, PalConfig{4, 2, {}, false}, 3);
    const auto a = importance::taylor(m, ds);
    const auto b = importance::taylor(aug, ds);
    for (const auto& h : a.heads) CHECK(score_of(b, h.head) == h.raw);
  }
}

TEST_CASE("normalize and compare") {
  auto report = [](std::vector<double> raw) {
    ImportanceReport r;
    for (std::size_t i = 0; i < raw.size(); ++i) r.heads.push_back({{0, static_cast<int>(i), HeadFamily::encoder}, raw[i], 0.0});
    return importance::normalize(r);
  };
  auto norm = [](const ImportanceReport& r) {
    std::vector<double> out;
    for (const auto& h : r.heads) out.push_back(h.normalized);
    return out;
  };
  CHECK(norm(report({2, 4})) == std::vector<double>{0, 1});
  CHECK(norm(report({3, 3, 3})) == std::vector<double>{0, 0, 0});
  CHECK(norm(report({1, 2, 3})) == std::vector<double>{0, 0.5, 1});
  CHECK(importance::compare(report({1, 2, 3}), report({1, 2, 3})) == doctest::Approx(1.0));
  CHECK(importance::compare(report({1, 0}), report({0, 1})) == 0.0);
  CHECK(importance::compare(report({1, 2}), report({2, 4})) == doctest::Approx(1.0));
  CHECK_THROWS_WITH(importance::compare(report({0, 0}), report({1, 2})), "undefined cosine");
  CHECK_THROWS(importance::compare(report({1}), report({1, 2})));
}

TEST_CASE("estimators are nonnegative where sign-constrained") {
  const Dataset ds = synth(6, 11, 3, 4, 20);
  const Model m = tiny_model(2, 2, 8, static_cast<int>(ds.vocab->size()), 10);
  for (auto method : {importance::Method::sensitivity, importance::Method::taylor})
    for (const auto& h : importance::estimate(m, ds, method).heads) CHECK(h.raw >= 0.0);
  CHECK(importance::method_from_string("loo") == importance::Method::leave_one_out);
  CHECK_THROWS(importance::method_from_string("lrp"));
}
