#include "mdpcnn/selection.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace mdpcnn {

namespace {

std::vector<float> downsample_features(const Image& img) {
  const int th = std::min(16, img.h);
  const int tw = std::min(16, img.w);
  std::vector<float> out(static_cast<std::size_t>(th) * tw);
  for (int by = 0; by < th; ++by) {
    const int y0 = by * img.h / th, y1 = (by + 1) * img.h / th;
    for (int bx = 0; bx < tw; ++bx) {
      const int x0 = bx * img.w / tw, x1 = (bx + 1) * img.w / tw;
      double acc = 0.0;
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          acc += img.pixels[static_cast<std::size_t>(y) * img.w + x];
        }
      }
      out[static_cast<std::size_t>(by) * tw + bx] =
          static_cast<float>(acc / (255.0 * (y1 - y0) * (x1 - x0)));
    }
  }
  return out;
}

Tensor4<float> image_to_tensor(const Image& img) {
  Tensor4<float> t(Shape4{1, 1, img.h, img.w});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    t.data[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  }
  return t;
}

}  // namespace

FeatureMatrix extract_features(const Corpus& corpus, ExtractorKind kind,
                               const ModelWeights<float>* weights) {
  if (corpus.objects.empty()) {
    throw UsageError("extract_features: empty dataset");
  }
  if (kind == ExtractorKind::embedding && weights == nullptr) {
    throw ConfigError("extract_features: embedding extractor needs weights");
  }

  ModelWeights<float> single_view;
  if (kind == ExtractorKind::embedding) {
    single_view = *weights;
    single_view.config.views_per_group = 1;
  }

  FeatureMatrix fm;
  fm.num_objects = static_cast<int>(corpus.objects.size());
  fm.num_classes = static_cast<int>(corpus.classes.size());
  for (int oi = 0; oi < fm.num_objects; ++oi) {
    const MultiViewObject& obj = corpus.objects[oi];
    for (int vi = 0; vi < static_cast<int>(obj.views.size()); ++vi) {
      std::vector<float> row;
      if (kind == ExtractorKind::downsample) {
        row = downsample_features(obj.views[vi]);
      } else {
        Tensor4<float> emb =
            forward_chain(single_view, image_to_tensor(obj.views[vi]));
        row.assign(emb.data.begin(), emb.data.end());
      }
      if (fm.dim == 0) fm.dim = static_cast<int>(row.size());
      fm.rows.push_back(std::move(row));
      fm.object_index.push_back(oi);
      fm.class_index.push_back(obj.class_index);
      fm.view_index.push_back(vi);
    }
  }
  return fm;
}

std::vector<std::vector<double>> class_centers(const FeatureMatrix& features) {
  if (features.rows.empty()) throw UsageError("class_centers: no features");
  std::vector<std::vector<double>> centers(
      features.num_classes, std::vector<double>(features.dim, 0.0));
  std::vector<int> counts(features.num_classes, 0);
  for (std::size_t r = 0; r < features.rows.size(); ++r) {
    const int c = features.class_index[r];
    counts[c]++;
    for (int j = 0; j < features.dim; ++j) {
      centers[c][j] += features.rows[r][j];
    }
  }
  for (int c = 0; c < features.num_classes; ++c) {
    if (counts[c] == 0) {
      throw ConfigError("class_centers: class " + std::to_string(c) +
                        " has no feature rows");
    }
    for (int j = 0; j < features.dim; ++j) centers[c][j] /= counts[c];
  }
  return centers;
}

namespace {

// (view id, squared distance) pairs for one object, hardest first.
std::vector<std::pair<int, double>> ranked_distances(
    const FeatureMatrix& features,
    const std::vector<std::vector<double>>& centers, int object_index) {
  std::vector<std::pair<int, double>> order;
  for (std::size_t r = 0; r < features.rows.size(); ++r) {
    if (features.object_index[r] != object_index) continue;
    const std::vector<double>& c = centers.at(features.class_index[r]);
    double d2 = 0.0;
    for (int j = 0; j < features.dim; ++j) {
      const double diff = features.rows[r][j] - c[j];
      d2 += diff * diff;
    }
    order.emplace_back(features.view_index[r], d2);
  }
  if (order.empty()) {
    throw UsageError("rank_views: object " + std::to_string(object_index) +
                     " has no feature rows");
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  return order;
}

}  // namespace

std::vector<int> rank_views(const FeatureMatrix& features,
                            const std::vector<std::vector<double>>& centers,
                            int object_index) {
  std::vector<int> ids;
  for (const auto& [view, d2] : ranked_distances(features, centers, object_index)) {
    ids.push_back(view);
  }
  return ids;
}

std::vector<ViewGroup> select_groups(
    const FeatureMatrix& features,
    const std::vector<std::vector<double>>& centers,
    const SelectionConfig& config) {
  config.validate();
  const int V = config.group_size;
  std::vector<ViewGroup> groups;
  std::mt19937_64 rng(config.seed);
  for (int oi = 0; oi < features.num_objects; ++oi) {
    auto ranked = ranked_distances(features, centers, oi);
    if (static_cast<int>(ranked.size()) < V) {
      throw ConfigError("select_groups: object " + std::to_string(oi) +
                        " has " + std::to_string(ranked.size()) +
                        " views, fewer than group size " + std::to_string(V));
    }
    ViewGroup g;
    g.object_index = oi;
    for (std::size_t r = 0; r < features.rows.size(); ++r) {
      if (features.object_index[r] == oi) {
        g.class_index = features.class_index[r];
        break;
      }
    }
    if (config.mode == SelectionMode::clustering) {
      for (int i = 0; i < V; ++i) {
        g.view_ids.push_back(ranked[i].first);
        g.dist2.push_back(ranked[i].second);
      }
    } else {
      // Ablation mode: V distinct views drawn uniformly, seeded.
      std::vector<int> idx(ranked.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(V);
      std::sort(idx.begin(), idx.end());
      for (int i : idx) {
        g.view_ids.push_back(ranked[i].first);
        g.dist2.push_back(ranked[i].second);
      }
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

void write_selection_manifest(const std::filesystem::path& path,
                              const Corpus& corpus,
                              const std::vector<ViewGroup>& groups) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const ViewGroup& g : groups) {
    os << corpus.objects.at(g.object_index).id << " "
       << corpus.classes.at(g.class_index);
    for (std::size_t i = 0; i < g.view_ids.size(); ++i) {
      os << (i == 0 ? " " : ";") << g.view_ids[i];
    }
    char buf[32];
    for (std::size_t i = 0; i < g.dist2.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.9e", g.dist2[i]);
      os << (i == 0 ? " " : ";") << buf;
    }
    os << "\n";
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<ViewGroup> read_selection_manifest(
    const std::filesystem::path& path, const Corpus& corpus) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<ViewGroup> groups;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string object_id, class_name, views_field, dist_field;
    if (!(ss >> object_id >> class_name >> views_field >> dist_field)) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": malformed selection manifest line");
    }
    ViewGroup g;
    g.object_index = corpus.find_object(object_id);
    if (g.object_index < 0) {
      throw IoError(path.string() + ": unknown object " + object_id);
    }
    g.class_index = corpus.find_class(class_name);
    if (g.class_index < 0) {
      throw IoError(path.string() + ": unknown class " + class_name);
    }
    std::istringstream vs(views_field);
    std::string tok;
    while (std::getline(vs, tok, ';')) g.view_ids.push_back(std::stoi(tok));
    std::istringstream ds(dist_field);
    while (std::getline(ds, tok, ';')) g.dist2.push_back(std::stod(tok));
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace mdpcnn
