#include "mdpcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "mdpcnn/rng.hpp"

namespace mdpcnn {

EvalGroup make_eval_group(const Corpus& corpus, int object_index,
                          const std::vector<int>& view_ids) {
  const MultiViewObject& obj = corpus.objects.at(object_index);
  EvalGroup g;
  g.object_index = object_index;
  g.class_index = obj.class_index;
  g.views = Tensor4<float>::zeros(static_cast<int>(view_ids.size()), 1,
                                  corpus.view_h, corpus.view_w);
  for (std::size_t v = 0; v < view_ids.size(); ++v) {
    const Image& img = obj.views.at(view_ids[v]);
    float* out = g.views.sample(static_cast<int>(v));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      out[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    }
  }
  return g;
}

namespace {

// Embeds a set of groups with one stacked forward pass.
Tensor4<float> embed_groups(const ModelWeights<float>& weights,
                            const std::vector<EvalGroup>& groups) {
  const int V = weights.config.views_per_group;
  const int G = static_cast<int>(groups.size());
  const int H = groups[0].views.shape.h, W = groups[0].views.shape.w;
  Tensor4<float> stacked(Shape4{G * V, 1, H, W});
  for (int i = 0; i < G; ++i) {
    if (groups[i].views.shape.n != V) {
      throw UsageError("embed_groups: group has " +
                       std::to_string(groups[i].views.shape.n) +
                       " views, expected " + std::to_string(V));
    }
    std::copy_n(groups[i].views.data.data(), groups[i].views.size(),
                stacked.sample(i * V));
  }
  return forward_chain(weights, stacked);
}

}  // namespace

std::vector<RankedRetrieval> embed_and_rank(
    const ModelWeights<float>& weights, const std::vector<EvalGroup>& queries,
    const std::vector<EvalGroup>& gallery) {
  if (gallery.empty()) throw UsageError("embed_and_rank: empty gallery");
  if (queries.empty()) throw UsageError("embed_and_rank: no queries");

  const Tensor4<float> qe = embed_groups(weights, queries);
  const Tensor4<float> ge = embed_groups(weights, gallery);
  const int D = qe.shape.k;

  std::vector<RankedRetrieval> out;
  out.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    RankedRetrieval r;
    r.query_object = queries[q].object_index;
    r.query_class = queries[q].class_index;

    struct Hit {
      double dist;
      int object;
      int cls;
    };
    std::vector<Hit> hits;
    hits.reserve(gallery.size());
    const float* qrow = qe.data.data() + q * static_cast<std::size_t>(D);
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      if (gallery[g].object_index == r.query_object) continue;
      const float* grow = ge.data.data() + g * static_cast<std::size_t>(D);
      double d2 = 0.0;
      for (int j = 0; j < D; ++j) {
        const double diff = static_cast<double>(qrow[j]) - grow[j];
        d2 += diff * diff;
      }
      hits.push_back({std::sqrt(d2), gallery[g].object_index,
                      gallery[g].class_index});
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      return a.object < b.object;
    });
    for (const Hit& h : hits) {
      r.gallery_objects.push_back(h.object);
      r.distances.push_back(h.dist);
      r.relevant.push_back(h.cls == r.query_class ? 1 : 0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

MetricValues compute_metrics(const std::vector<RankedRetrieval>& rankings,
                             int cutoff) {
  if (rankings.empty()) throw UsageError("compute_metrics: no rankings");
  MetricValues m;
  const int Q = static_cast<int>(rankings.size());

  // GTM for ANMRR is the largest ground-truth set over the query set.
  int gtm = 0;
  for (const RankedRetrieval& r : rankings) {
    gtm = std::max(gtm, static_cast<int>(std::count(
                            r.relevant.begin(), r.relevant.end(), 1)));
  }

  double nn = 0, ft = 0, st = 0, f = 0, dcg = 0, anmrr = 0, map = 0;
  int with_relevant = 0;
  for (const RankedRetrieval& r : rankings) {
    const int n = static_cast<int>(r.relevant.size());
    const int R = static_cast<int>(
        std::count(r.relevant.begin(), r.relevant.end(), 1));

    if (n > 0 && r.relevant[0]) nn += 1.0;

    // F-measure at the retrieval cutoff.
    const int c = std::min(cutoff, n);
    int rel_at_c = 0;
    for (int i = 0; i < c; ++i) rel_at_c += r.relevant[i];
    const double precision = c > 0 ? static_cast<double>(rel_at_c) / c : 0.0;
    const double recall = R > 0 ? static_cast<double>(rel_at_c) / R : 0.0;
    if (precision + recall > 0) {
      f += 2.0 * precision * recall / (precision + recall);
    }

    if (R == 0) {
      m.zero_relevant_queries++;
      continue;  // FT/ST/ANMRR skip; DCG and AP contribute zero
    }
    with_relevant++;

    int rel_in_r = 0;
    for (int i = 0; i < std::min(R, n); ++i) rel_in_r += r.relevant[i];
    ft += static_cast<double>(rel_in_r) / R;

    int rel_in_2r = 0;
    for (int i = 0; i < std::min(2 * R, n); ++i) rel_in_2r += r.relevant[i];
    st += static_cast<double>(rel_in_2r) / R;

    double gain = 0.0, ideal = 0.0;
    for (int i = 0; i < n; ++i) {
      const double disc = (i == 0) ? 1.0 : 1.0 / std::log2(i + 1.0);
      if (r.relevant[i]) gain += disc;
      if (i < R) ideal += disc;
    }
    dcg += gain / ideal;

    double ap = 0.0;
    int seen = 0;
    for (int i = 0; i < n; ++i) {
      if (r.relevant[i]) {
        ++seen;
        ap += static_cast<double>(seen) / (i + 1);
      }
    }
    map += ap / R;

    const int K = std::min(4 * R, 2 * gtm);
    double avr = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!r.relevant[i]) continue;
      const int rank = i + 1;
      avr += (rank <= K) ? rank : 1.25 * K;
    }
    avr /= R;
    const double mrr = avr - 0.5 - R / 2.0;
    anmrr += mrr / (1.25 * K - 0.5 - R / 2.0);
  }

  m.nn = nn / Q;
  m.f = f / Q;
  m.dcg = dcg / Q;
  m.map = map / Q;
  if (with_relevant > 0) {
    m.ft = ft / with_relevant;
    m.st = st / with_relevant;
    m.anmrr = anmrr / with_relevant;
  }
  return m;
}

std::vector<std::pair<double, double>> pr_curve(
    const std::vector<RankedRetrieval>& rankings) {
  if (rankings.empty()) throw UsageError("pr_curve: no rankings");
  constexpr int kLevels = 20;
  std::vector<double> precision_sum(kLevels, 0.0);
  int counted = 0;
  for (const RankedRetrieval& r : rankings) {
    const int n = static_cast<int>(r.relevant.size());
    const int R = static_cast<int>(
        std::count(r.relevant.begin(), r.relevant.end(), 1));
    if (R == 0) continue;
    ++counted;
    // Interpolated precision: max precision at any recall >= level.
    std::vector<double> interp(kLevels, 0.0);
    int seen = 0;
    for (int i = 0; i < n; ++i) {
      if (!r.relevant[i]) continue;
      ++seen;
      const double rec = static_cast<double>(seen) / R;
      const double prec = static_cast<double>(seen) / (i + 1);
      for (int l = 0; l < kLevels; ++l) {
        const double level = 0.05 * (l + 1);
        if (rec >= level - 1e-12) {
          interp[l] = std::max(interp[l], prec);
        }
      }
    }
    for (int l = 0; l < kLevels; ++l) precision_sum[l] += interp[l];
  }
  std::vector<std::pair<double, double>> curve;
  for (int l = 0; l < kLevels; ++l) {
    curve.emplace_back(0.05 * (l + 1),
                       counted > 0 ? precision_sum[l] / counted : 0.0);
  }
  return curve;
}

MetricReport repeat_protocol(const ModelWeights<float>& weights,
                             const Corpus& test_corpus, int runs,
                             std::uint64_t seed) {
  if (runs < 1) throw UsageError("repeat_protocol: runs must be >= 1");
  const int V = weights.config.views_per_group;
  const int G = static_cast<int>(test_corpus.objects.size());
  if (G < 2) throw UsageError("repeat_protocol: need at least 2 objects");

  std::vector<MetricValues> per_run;
  std::vector<double> pr_sum(20, 0.0);
  for (int run = 0; run < runs; ++run) {
    std::mt19937_64 rng(mix_seed(seed, run));
    std::vector<EvalGroup> groups;
    groups.reserve(G);
    for (int oi = 0; oi < G; ++oi) {
      const MultiViewObject& obj = test_corpus.objects[oi];
      const int avail = static_cast<int>(obj.views.size());
      if (avail < V) {
        throw UsageError("repeat_protocol: object " + obj.id + " has " +
                         std::to_string(avail) + " test views, needs " +
                         std::to_string(V));
      }
      std::vector<int> ids(avail);
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      ids.resize(V);
      groups.push_back(make_eval_group(test_corpus, oi, ids));
    }
    auto rankings = embed_and_rank(weights, groups, groups);
    per_run.push_back(compute_metrics(rankings));
    auto curve = pr_curve(rankings);
    for (std::size_t l = 0; l < curve.size(); ++l) {
      pr_sum[l] += curve[l].second;
    }
  }

  auto stat = [&per_run](double MetricValues::* field) {
    MetricStat s;
    for (const MetricValues& v : per_run) s.mean += v.*field;
    s.mean /= static_cast<double>(per_run.size());
    double var = 0.0;
    for (const MetricValues& v : per_run) {
      const double d = v.*field - s.mean;
      var += d * d;
    }
    s.stddev = std::sqrt(var / static_cast<double>(per_run.size()));
    return s;
  };

  MetricReport report;
  report.nn = stat(&MetricValues::nn);
  report.ft = stat(&MetricValues::ft);
  report.st = stat(&MetricValues::st);
  report.f = stat(&MetricValues::f);
  report.dcg = stat(&MetricValues::dcg);
  report.anmrr = stat(&MetricValues::anmrr);
  report.map = stat(&MetricValues::map);
  report.repeats = runs;
  for (const MetricValues& v : per_run) {
    report.zero_relevant_warnings += v.zero_relevant_queries;
  }
  for (int l = 0; l < 20; ++l) {
    report.pr.emplace_back(0.05 * (l + 1), pr_sum[l] / runs);
  }
  return report;
}

void write_metric_report(const std::filesystem::path& path,
                         const MetricReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  char buf[128];
  os << "repeats = " << report.repeats << "\n";
  os << "zero_relevant_warnings = " << report.zero_relevant_warnings << "\n";
  auto line = [&](const char* name, const MetricStat& s) {
    std::snprintf(buf, sizeof(buf), "%s_mean = %.6f\n%s_std = %.6f\n", name,
                  s.mean, name, s.stddev);
    os << buf;
  };
  line("nn", report.nn);
  line("ft", report.ft);
  line("st", report.st);
  line("f", report.f);
  line("dcg", report.dcg);
  line("anmrr", report.anmrr);
  line("map", report.map);
  if (!os) throw IoError("failed writing " + path.string());
}

void write_pr_csv(const std::filesystem::path& path,
                  const MetricReport& report) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "recall,precision\n";
  char buf[64];
  for (const auto& [recall, precision] : report.pr) {
    std::snprintf(buf, sizeof(buf), "%.2f,%.6f\n", recall, precision);
    os << buf;
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace mdpcnn
