#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "mdpcnn/dataset.hpp"
#include "mdpcnn/selection.hpp"

using namespace mdpcnn;
namespace fs = std::filesystem;

namespace {

// A feature matrix assembled directly, no corpus needed.
FeatureMatrix direct_features(const std::vector<std::vector<float>>& rows,
                              const std::vector<int>& object_of,
                              const std::vector<int>& class_of) {
  FeatureMatrix fm;
  fm.dim = static_cast<int>(rows[0].size());
  fm.rows = rows;
  fm.object_index = object_of;
  fm.class_index = class_of;
  fm.num_objects = *std::max_element(object_of.begin(), object_of.end()) + 1;
  fm.num_classes = *std::max_element(class_of.begin(), class_of.end()) + 1;
  std::vector<int> next(fm.num_objects, 0);
  for (int oi : object_of) fm.view_index.push_back(next[oi]++);
  return fm;
}

fs::path synth_corpus(const std::string& name, int classes, int objects,
                      int views, int size, std::uint64_t seed) {
  const fs::path root = fs::temp_directory_path() / name;
  fs::remove_all(root);
  SynthSpec spec;
  spec.num_classes = classes;
  spec.objects_per_class = objects;
  spec.views_per_object = views;
  spec.image_size = size;
  synth_generate(spec, seed, root);
  return root;
}

}  // namespace

TEST_CASE("extract_features") {
  SUBCASE("downsample of an 8x8 image is a 64-dim raw vector") {
    Corpus c;
    c.classes = {"a"};
    c.view_h = c.view_w = 8;
    MultiViewObject obj;
    obj.id = "a/one";
    obj.class_name = "a";
    obj.class_index = 0;
    for (int v = 0; v < 3; ++v) {
      Image img;
      img.h = img.w = 8;
      img.pixels.assign(64, static_cast<std::uint8_t>(v));
      obj.views.push_back(img);
    }
    c.objects.push_back(obj);
    FeatureMatrix fm = extract_features(c, ExtractorKind::downsample);
    CHECK(fm.dim == 64);
    CHECK(fm.rows.size() == 3);
  }
  SUBCASE("downsample of a 64x64 image is a 256-dim vector") {
    const fs::path root = synth_corpus("mdpcnn_sel_small", 1, 1, 3, 64, 3);
    Corpus c = load_corpus(root);
    FeatureMatrix fm = extract_features(c, ExtractorKind::downsample);
    CHECK(fm.dim == 256);
  }
  SUBCASE("identical views give identical features") {
    const fs::path root = synth_corpus("mdpcnn_sel_id", 2, 1, 3, 32, 5);
    Corpus c = load_corpus(root);
    c.objects[0].views[1] = c.objects[0].views[0];
    FeatureMatrix fm = extract_features(c, ExtractorKind::downsample);
    CHECK(fm.rows[0] == fm.rows[1]);
  }
  SUBCASE("row count equals total view count") {
    const fs::path root = synth_corpus("mdpcnn_sel_rows", 3, 2, 4, 32, 7);
    Corpus c = load_corpus(root);
    FeatureMatrix fm = extract_features(c, ExtractorKind::downsample);
    CHECK(fm.rows.size() == 24);
  }
  SUBCASE("empty dataset is a usage error") {
    Corpus c;
    CHECK_THROWS_AS(static_cast<void>(
                        extract_features(c, ExtractorKind::downsample)),
                    UsageError);
  }
}

TEST_CASE("class_centers") {
  SUBCASE("single member class keeps its vector") {
    auto fm = direct_features({{1.f, 2.f}}, {0}, {0});
    auto centers = class_centers(fm);
    CHECK(centers[0] == std::vector<double>{1.0, 2.0});
  }
  SUBCASE("two members average") {
    auto fm = direct_features({{0.f, 0.f}, {2.f, 0.f}}, {0, 1}, {0, 0});
    auto centers = class_centers(fm);
    CHECK(centers[0] == std::vector<double>{1.0, 0.0});
  }
  SUBCASE("permuting rows keeps centers") {
    auto a = direct_features({{1.f, 0.f}, {0.f, 1.f}, {3.f, 3.f}}, {0, 0, 1},
                             {0, 0, 1});
    auto b = direct_features({{0.f, 1.f}, {1.f, 0.f}, {3.f, 3.f}}, {0, 0, 1},
                             {0, 0, 1});
    CHECK(class_centers(a) == class_centers(b));
  }
}

TEST_CASE("rank_views") {
  SUBCASE("descending squared distance") {
    // Distances^2 to center (0,0): 4, 1, 9 for views 0, 1, 2.
    auto fm = direct_features({{2.f, 0.f}, {1.f, 0.f}, {3.f, 0.f},
                               {0.f, 0.f}},
                              {0, 0, 0, 1}, {0, 0, 0, 1});
    std::vector<std::vector<double>> centers{{0.0, 0.0}, {0.0, 0.0}};
    CHECK(rank_views(fm, centers, 0) == std::vector<int>{2, 0, 1});
  }
  SUBCASE("all equidistant falls back to view id order") {
    auto fm = direct_features({{1.f, 0.f}, {0.f, 1.f}, {-1.f, 0.f}},
                              {0, 0, 0}, {0, 0, 0});
    std::vector<std::vector<double>> centers{{0.0, 0.0}};
    CHECK(rank_views(fm, centers, 0) == std::vector<int>{0, 1, 2});
  }
  SUBCASE("matches a brute-force exhaustive ranking") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::vector<float>> rows;
      std::vector<int> obj, cls;
      for (int v = 0; v < 5; ++v) {
        rows.push_back({dist(rng), dist(rng), dist(rng)});
        obj.push_back(0);
        cls.push_back(0);
      }
      auto fm = direct_features(rows, obj, cls);
      auto centers = class_centers(fm);
      auto ranked = rank_views(fm, centers, 0);

      // Brute force: compute all distances, selection-sort by (d2 desc, id).
      std::vector<std::pair<double, int>> brute;
      for (int v = 0; v < 5; ++v) {
        double d2 = 0;
        for (int j = 0; j < 3; ++j) {
          const double d = rows[v][j] - centers[0][j];
          d2 += d * d;
        }
        brute.emplace_back(-d2, v);
      }
      std::sort(brute.begin(), brute.end());
      for (int v = 0; v < 5; ++v) CHECK(ranked[v] == brute[v].second);
    }
  }
}

TEST_CASE("select_groups") {
  auto fm = direct_features(
      {{4.f, 0.f}, {1.f, 0.f}, {3.f, 0.f}, {2.f, 0.f}, {5.f, 0.f},
       {0.f, 1.f}, {0.f, 3.f}, {0.f, 2.f}, {0.f, 5.f}, {0.f, 4.f}},
      {0, 0, 0, 0, 0, 1, 1, 1, 1, 1}, {0, 0, 0, 0, 0, 1, 1, 1, 1, 1});
  std::vector<std::vector<double>> centers{{0.0, 0.0}, {0.0, 0.0}};

  SUBCASE("keeps the hardest V views per object in rank order") {
    SelectionConfig cfg;
    cfg.group_size = 3;
    auto groups = select_groups(fm, centers, cfg);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].view_ids == std::vector<int>{4, 0, 2});
    CHECK(groups[1].view_ids == std::vector<int>{3, 4, 1});
    // Farthest-first: every selected distance >= every unselected one.
    for (const auto& g : groups) {
      const double weakest = g.dist2.back();
      auto ranked = rank_views(fm, centers, g.object_index);
      for (std::size_t r = 3; r < ranked.size(); ++r) {
        double d2 = 0;
        for (std::size_t i = 0; i < fm.rows.size(); ++i) {
          if (fm.object_index[i] == g.object_index &&
              fm.view_index[i] == ranked[r]) {
            for (int j = 0; j < fm.dim; ++j) {
              const double d = fm.rows[i][j] - centers[g.class_index][j];
              d2 += d * d;
            }
          }
        }
        CHECK(d2 <= weakest);
      }
    }
  }
  SUBCASE("V equal to the view count keeps all views") {
    SelectionConfig cfg;
    cfg.group_size = 5;
    auto groups = select_groups(fm, centers, cfg);
    CHECK(groups[0].view_ids.size() == 5);
  }
  SUBCASE("random mode is reproducible and same-cardinality") {
    SelectionConfig cfg;
    cfg.group_size = 3;
    cfg.mode = SelectionMode::random_sample;
    cfg.seed = 99;
    auto a = select_groups(fm, centers, cfg);
    auto b = select_groups(fm, centers, cfg);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].view_ids == b[i].view_ids);
      CHECK(a[i].view_ids.size() == 3);
    }
  }
  SUBCASE("object with fewer views than V errors") {
    auto small = direct_features({{1.f, 0.f}, {2.f, 0.f}}, {0, 0}, {0, 0});
    std::vector<std::vector<double>> c1{{0.0, 0.0}};
    SelectionConfig cfg;
    cfg.group_size = 3;
    CHECK_THROWS_AS(static_cast<void>(select_groups(small, c1, cfg)),
                    ConfigError);
  }
}

TEST_CASE("selection manifest round-trip") {
  const fs::path root = synth_corpus("mdpcnn_sel_manifest", 2, 2, 5, 32, 17);
  Corpus c = load_corpus(root);
  FeatureMatrix fm = extract_features(c, ExtractorKind::downsample);
  auto centers = class_centers(fm);
  SelectionConfig cfg;
  cfg.group_size = 3;
  auto groups = select_groups(fm, centers, cfg);

  const fs::path manifest = root / "selection_manifest.txt";
  write_selection_manifest(manifest, c, groups);
  auto back = read_selection_manifest(manifest, c);
  REQUIRE(back.size() == groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    CHECK(back[i].object_index == groups[i].object_index);
    CHECK(back[i].class_index == groups[i].class_index);
    CHECK(back[i].view_ids == groups[i].view_ids);
  }
}
