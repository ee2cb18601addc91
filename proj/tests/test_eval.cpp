#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "mdpcnn/eval.hpp"
#include "metric_oracles.hpp"

using namespace mdpcnn;
namespace fs = std::filesystem;

namespace {

RankedRetrieval make_ranking(const std::vector<int>& flags, int query = 0) {
  RankedRetrieval r;
  r.query_object = query;
  r.query_class = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    r.gallery_objects.push_back(static_cast<int>(i) + query + 1);
    r.distances.push_back(0.1 * static_cast<double>(i + 1));
    r.relevant.push_back(flags[i] ? 1 : 0);
  }
  return r;
}

std::vector<RankedRetrieval> random_rankings(std::mt19937_64& rng,
                                             int queries, int max_items) {
  std::vector<RankedRetrieval> out;
  std::uniform_int_distribution<int> size_dist(1, max_items);
  std::bernoulli_distribution rel(0.4);
  for (int q = 0; q < queries; ++q) {
    std::vector<int> flags;
    const int n = size_dist(rng);
    for (int i = 0; i < n; ++i) flags.push_back(rel(rng) ? 1 : 0);
    out.push_back(make_ranking(flags, q));
  }
  return out;
}

NetworkConfig eval_net_config() {
  NetworkConfig c;
  c.conv_channels = {2, 2, 3, 3, 4};
  c.input_h = c.input_w = 32;
  c.views_per_group = 3;
  c.fc1_width = 8;
  c.embedding_dim = 4;
  c.num_classes = 2;
  return c;
}

}  // namespace

TEST_CASE("embed_and_rank") {
  const fs::path root = fs::temp_directory_path() / "mdpcnn_eval_corpus";
  fs::remove_all(root);
  SynthSpec spec;
  spec.num_classes = 2;
  spec.objects_per_class = 3;
  spec.views_per_object = 4;
  spec.image_size = 32;
  synth_generate(spec, 3, root);
  Corpus corpus = load_corpus(root);
  auto weights = build<float>(eval_net_config(), 13);

  std::vector<EvalGroup> gallery;
  for (int oi = 0; oi < 6; ++oi) {
    gallery.push_back(make_eval_group(corpus, oi, {0, 1, 2}));
  }

  SUBCASE("gallery of one gives a single-entry ranking") {
    auto rankings = embed_and_rank(weights, {gallery[0]}, {gallery[1]});
    REQUIRE(rankings.size() == 1);
    CHECK(rankings[0].gallery_objects.size() == 1);
  }
  SUBCASE("a gallery item with the query's embedding ranks first") {
    EvalGroup clone = gallery[0];
    clone.object_index = 99;  // different object, identical views
    std::vector<EvalGroup> g = {gallery[1], gallery[2], clone};
    auto rankings = embed_and_rank(weights, {gallery[0]}, g);
    CHECK(rankings[0].gallery_objects[0] == 99);
    CHECK(rankings[0].distances[0] == 0.0);
  }
  SUBCASE("query never appears in its own gallery list") {
    auto rankings = embed_and_rank(weights, gallery, gallery);
    for (const auto& r : rankings) {
      CHECK(r.gallery_objects.size() == 5);
      for (int obj : r.gallery_objects) CHECK(obj != r.query_object);
    }
  }
  SUBCASE("distances are non-decreasing and match a brute-force sort") {
    auto rankings = embed_and_rank(weights, gallery, gallery);
    // Independent path: embed every group one by one and sort by hand.
    for (const auto& r : rankings) {
      for (std::size_t i = 1; i < r.distances.size(); ++i) {
        CHECK(r.distances[i] >= r.distances[i - 1]);
      }
    }
    const int D = weights.config.embedding_dim;
    std::vector<std::vector<float>> embs;
    for (const auto& g : gallery) {
      auto e = forward_chain(weights, g.views);
      embs.push_back({e.data.begin(), e.data.end()});
    }
    for (std::size_t q = 0; q < gallery.size(); ++q) {
      std::vector<std::pair<double, int>> order;
      for (std::size_t j = 0; j < gallery.size(); ++j) {
        if (j == q) continue;
        double d2 = 0;
        for (int k = 0; k < D; ++k) {
          const double diff =
              static_cast<double>(embs[q][k]) - embs[j][k];
          d2 += diff * diff;
        }
        order.emplace_back(std::sqrt(d2), gallery[j].object_index);
      }
      std::sort(order.begin(), order.end());
      for (std::size_t j = 0; j < order.size(); ++j) {
        CHECK(rankings[q].gallery_objects[j] == order[j].second);
      }
    }
  }
  SUBCASE("empty gallery is a usage error") {
    CHECK_THROWS_AS(
        static_cast<void>(embed_and_rank(weights, {gallery[0]}, {})),
        UsageError);
  }
}

TEST_CASE("metric hand cases") {
  SUBCASE("perfect retrieval maxes every gain metric and zeroes ANMRR") {
    std::vector<RankedRetrieval> rankings{
        make_ranking({1, 1, 1, 0, 0, 0}),
        make_ranking({1, 1, 0, 0}),
    };
    auto m = compute_metrics(rankings);
    CHECK(m.nn == 1.0);
    CHECK(m.ft == 1.0);
    CHECK(m.st == 1.0);
    CHECK(m.dcg == 1.0);
    CHECK(m.map == 1.0);
    CHECK(m.anmrr == 0.0);
  }
  SUBCASE("single query [rel, irrel, rel] with R = 2") {
    std::vector<RankedRetrieval> rankings{make_ranking({1, 0, 1})};
    auto m = compute_metrics(rankings);
    CHECK(m.ft == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(m.st == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(m.map == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  }
  SUBCASE("all metrics stay in [0, 1] on random rankings") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      auto rankings = random_rankings(rng, 6, 8);
      auto m = compute_metrics(rankings);
      for (double v : {m.nn, m.ft, m.st, m.f, m.dcg, m.anmrr, m.map}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
  SUBCASE("zero-relevant queries are excluded and counted") {
    std::vector<RankedRetrieval> rankings{
        make_ranking({1, 0}),
        make_ranking({0, 0}),
    };
    auto m = compute_metrics(rankings);
    CHECK(m.zero_relevant_queries == 1);
    CHECK(m.ft == 1.0);  // only the first query counts for FT
  }
}

TEST_CASE("metrics match the brute-force oracles on 200 random instances") {
  std::mt19937_64 rng(7);
  for (int inst = 0; inst < 200; ++inst) {
    auto rankings = random_rankings(rng, 1 + static_cast<int>(rng() % 6), 8);
    auto m = compute_metrics(rankings);
    CHECK(m.nn == doctest::Approx(oracle::nn(rankings)).epsilon(1e-12));
    CHECK(m.ft == doctest::Approx(oracle::ft(rankings)).epsilon(1e-12));
    CHECK(m.st == doctest::Approx(oracle::st(rankings)).epsilon(1e-12));
    CHECK(m.f == doctest::Approx(oracle::f_measure(rankings)).epsilon(1e-12));
    CHECK(m.dcg == doctest::Approx(oracle::dcg(rankings)).epsilon(1e-12));
    CHECK(m.anmrr ==
          doctest::Approx(oracle::anmrr(rankings)).epsilon(1e-12));
    CHECK(m.map == doctest::Approx(oracle::map(rankings)).epsilon(1e-12));

    auto curve = pr_curve(rankings);
    auto ref = oracle::pr(rankings);
    for (std::size_t l = 0; l < curve.size(); ++l) {
      CHECK(curve[l].second ==
            doctest::Approx(ref[l].second).epsilon(1e-12));
    }
  }
}

TEST_CASE("moving a relevant item earlier never hurts") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto rankings = random_rankings(rng, 1, 8);
    auto& flags = rankings[0].relevant;
    // Find a relevant item preceded by an irrelevant one and swap them.
    int at = -1;
    for (std::size_t i = 1; i < flags.size(); ++i) {
      if (flags[i] && !flags[i - 1]) {
        at = static_cast<int>(i);
        break;
      }
    }
    if (at < 0) continue;
    auto before = compute_metrics(rankings);
    std::swap(flags[at], flags[at - 1]);
    auto after = compute_metrics(rankings);
    CHECK(after.nn >= before.nn);
    CHECK(after.ft >= before.ft);
    CHECK(after.st >= before.st);
    CHECK(after.dcg >= before.dcg);
    CHECK(after.map >= before.map);
    CHECK(after.anmrr <= before.anmrr);
  }
}

TEST_CASE("shuffled labels concentrate NN near the class prior") {
  std::mt19937_64 rng(13);
  const int queries = 40, gallery = 39, per_class_rel = 9;
  double total = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    std::vector<RankedRetrieval> rankings;
    for (int q = 0; q < queries; ++q) {
      std::vector<int> flags(gallery, 0);
      for (int i = 0; i < per_class_rel; ++i) flags[i] = 1;
      std::shuffle(flags.begin(), flags.end(), rng);
      rankings.push_back(make_ranking(flags, q));
    }
    total += compute_metrics(rankings).nn;
  }
  const double mean = total / trials;
  const double prior = static_cast<double>(per_class_rel) / gallery;
  const double sigma =
      std::sqrt(prior * (1 - prior) / (queries * trials));
  CHECK(std::abs(mean - prior) <= 3 * sigma);
}

TEST_CASE("pr_curve") {
  SUBCASE("perfect retrieval holds precision 1 everywhere") {
    std::vector<RankedRetrieval> rankings{make_ranking({1, 1, 0, 0})};
    for (auto [recall, precision] : pr_curve(rankings)) {
      CHECK(precision == 1.0);
    }
  }
  SUBCASE("single query [rel, irrel] reaches (1.0, 1.0)") {
    std::vector<RankedRetrieval> rankings{make_ranking({1, 0})};
    auto curve = pr_curve(rankings);
    CHECK(curve.back().first == doctest::Approx(1.0));
    CHECK(curve.back().second == doctest::Approx(1.0));
  }
  SUBCASE("recall grid is strictly increasing") {
    std::vector<RankedRetrieval> rankings{make_ranking({0, 1})};
    auto curve = pr_curve(rankings);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      CHECK(curve[i].first > curve[i - 1].first);
    }
  }
}

TEST_CASE("repeat_protocol") {
  const fs::path root = fs::temp_directory_path() / "mdpcnn_eval_repeat";
  fs::remove_all(root);
  SynthSpec spec;
  spec.num_classes = 2;
  spec.objects_per_class = 3;
  spec.views_per_object = 16;
  spec.image_size = 32;
  synth_generate(spec, 23, root);
  Corpus corpus = load_corpus(root);
  auto [train_c, test_c] = split(corpus, SplitSpec{});
  auto weights = build<float>(eval_net_config(), 29);

  SUBCASE("runs=1 equals a single evaluation and has zero std") {
    auto report = repeat_protocol(weights, test_c, 1, 99);
    CHECK(report.repeats == 1);
    CHECK(report.nn.stddev == 0.0);
  }
  SUBCASE("fixed seed reproduces the report") {
    auto a = repeat_protocol(weights, test_c, 3, 7);
    auto b = repeat_protocol(weights, test_c, 3, 7);
    CHECK(a.map.mean == b.map.mean);
    CHECK(a.nn.mean == b.nn.mean);
    CHECK(a.anmrr.mean == b.anmrr.mean);
  }
  SUBCASE("report files are written") {
    auto report = repeat_protocol(weights, test_c, 2, 7);
    write_metric_report(root / "metrics.txt", report);
    write_pr_csv(root / "pr.csv", report);
    CHECK(fs::exists(root / "metrics.txt"));
    CHECK(fs::exists(root / "pr.csv"));
  }
}
