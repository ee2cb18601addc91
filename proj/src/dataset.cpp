#include "mdpcnn/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>

#include "mdpcnn/rng.hpp"

namespace fs = std::filesystem;

namespace mdpcnn {

// --- PGM (binary P5, 8-bit) ------------------------------------------------

namespace {

int next_pgm_token(std::istream& is) {
  // Skips whitespace and '#' comment lines, then reads one integer.
  int c = is.get();
  while (is) {
    if (c == '#') {
      while (is && c != '\n') c = is.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = is.get();
  }
  if (!is) return -1;
  int value = 0;
  while (is && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = is.get();
  }
  return value;
}

}  // namespace

Image read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') {
    throw IoError(path.string() + ": not a binary PGM (P5) file");
  }
  const int w = next_pgm_token(is);
  const int h = next_pgm_token(is);
  const int maxval = next_pgm_token(is);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw IoError(path.string() + ": bad PGM header");
  }
  Image img;
  img.w = w;
  img.h = h;
  img.pixels.resize(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw IoError(path.string() + ": truncated pixel data");
  return img;
}

void write_pgm(const Image& img, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

// --- corpus loading ---------------------------------------------------------

int Corpus::find_object(const std::string& id) const {
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (objects[i].id == id) return static_cast<int>(i);
  }
  return -1;
}

int Corpus::find_class(const std::string& name) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] == name) return static_cast<int>(i);
  }
  return -1;
}

Corpus load_corpus(const fs::path& root) {
  if (!fs::is_directory(root)) {
    throw IoError("corpus root " + root.string() + " is not a directory");
  }
  Corpus corpus;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) {
    throw IoError("corpus root " + root.string() + " has no class directories");
  }

  for (const auto& class_dir : class_dirs) {
    const std::string class_name = class_dir.filename().string();
    corpus.classes.push_back(class_name);
    const int class_index = static_cast<int>(corpus.classes.size()) - 1;

    std::vector<fs::path> object_dirs;
    for (const auto& e : fs::directory_iterator(class_dir)) {
      if (e.is_directory()) object_dirs.push_back(e.path());
    }
    std::sort(object_dirs.begin(), object_dirs.end());
    if (object_dirs.empty()) {
      throw IoError("class directory " + class_dir.string() + " is empty");
    }

    for (const auto& object_dir : object_dirs) {
      MultiViewObject obj;
      obj.class_name = class_name;
      obj.class_index = class_index;
      obj.id = class_name + "/" + object_dir.filename().string();

      std::map<long, fs::path> by_index;
      for (const auto& e : fs::directory_iterator(object_dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".pgm") continue;
        const std::string stem = e.path().stem().string();
        char* end = nullptr;
        const long idx = std::strtol(stem.c_str(), &end, 10);
        if (end == stem.c_str() || *end != '\0') {
          throw IoError("object " + obj.id + ": view file " +
                        e.path().filename().string() +
                        " has a non-numeric name");
        }
        by_index[idx] = e.path();
      }
      if (by_index.size() < 3) {
        throw IoError("object " + obj.id + " has " +
                      std::to_string(by_index.size()) +
                      " views; at least 3 are required");
      }
      const long first = by_index.begin()->first;
      long expect = first;
      for (const auto& [idx, path] : by_index) {
        if (idx != expect) {
          throw IoError("object " + obj.id + ": view indices not contiguous, " +
                        "missing index " + std::to_string(expect));
        }
        ++expect;
        Image img = read_pgm(path);
        if (corpus.view_h == 0) {
          corpus.view_h = img.h;
          corpus.view_w = img.w;
        } else if (img.h != corpus.view_h || img.w != corpus.view_w) {
          throw IoError("object " + obj.id + " view " + std::to_string(idx) +
                        ": dimensions " + std::to_string(img.w) + "x" +
                        std::to_string(img.h) + " differ from corpus " +
                        std::to_string(corpus.view_w) + "x" +
                        std::to_string(corpus.view_h));
        }
        obj.views.push_back(std::move(img));
      }
      corpus.objects.push_back(std::move(obj));
    }
  }
  return corpus;
}

// --- split ------------------------------------------------------------------

std::pair<Corpus, Corpus> split(const Corpus& corpus, const SplitSpec& spec) {
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
    throw ConfigError("split: train fraction must be in (0, 1)");
  }
  Corpus train, test;
  train.classes = test.classes = corpus.classes;
  train.view_h = test.view_h = corpus.view_h;
  train.view_w = test.view_w = corpus.view_w;
  for (const MultiViewObject& obj : corpus.objects) {
    const int total = static_cast<int>(obj.views.size());
    if (total < 2) {
      throw ConfigError("split: object " + obj.id + " has fewer than 2 views");
    }
    const int n_train =
        static_cast<int>(std::floor(spec.train_fraction * total));
    if (n_train < 1 || n_train >= total) {
      throw ConfigError("split: object " + obj.id +
                        " would have an empty train or test side");
    }
    MultiViewObject tr = obj, te = obj;
    tr.views.assign(obj.views.begin(), obj.views.begin() + n_train);
    te.views.assign(obj.views.begin() + n_train, obj.views.end());
    train.objects.push_back(std::move(tr));
    test.objects.push_back(std::move(te));
  }
  return {std::move(train), std::move(test)};
}

// --- synthetic corpus -------------------------------------------------------

namespace {

// Signed inside-margin in unit shape coordinates (> 0 inside, in units of
// the shape radius). Footprints are sized so no two shapes coincide under
// rotation; square and diamond in particular differ clearly in extent.
double shape_margin(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0:  // disk
      return 1.0 - r;
    case 1:  // square
      return 0.80 - std::max(au, av);
    case 2: {  // upright triangle, apex at (0, -0.95), base at v = 0.62
      const double base = 0.62 - v;
      const double side = (v + 0.95 - 1.744 * au) / 2.01;
      return std::min(base, side);
    }
    case 3: {  // cross
      const double bar1 = std::min(0.28 - au, 0.88 - av);
      const double bar2 = std::min(0.88 - au, 0.28 - av);
      return std::max(bar1, bar2);
    }
    case 4:  // ring
      return std::min(0.92 - r, r - 0.52);
    case 5:  // bar
      return std::min(0.92 - au, 0.30 - av);
    case 6: {  // L: vertical stroke on the left, horizontal stroke below
      const double vert = std::min({u + 0.85, -0.25 - u, v + 0.85, 0.85 - v});
      const double horiz = std::min({u + 0.85, 0.85 - u, v - 0.25, 0.85 - v});
      return std::max(vert, horiz);
    }
    default:  // diamond
      return (0.62 - (au + av)) / 1.4142135623730951;
  }
}

const char* kShapeNames[8] = {"disk",  "square", "triangle", "cross",
                              "ring", "bar",    "lshape",   "diamond"};

}  // namespace

void synth_generate(const SynthSpec& spec, std::uint64_t seed,
                    const fs::path& root) {
  if (spec.num_classes < 1 || spec.objects_per_class < 1 ||
      spec.views_per_object < 1) {
    throw ConfigError("synth: all counts must be >= 1");
  }
  if (spec.image_size < 16) {
    throw ConfigError("synth: image size " + std::to_string(spec.image_size) +
                      " is too small for the shapes (minimum 16)");
  }
  fs::create_directories(root);

  const int S = spec.image_size;
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + root.string());
  manifest << "seed = " << seed << "\n";

  for (int c = 0; c < spec.num_classes; ++c) {
    const int shape = c % 8;
    char class_name[32];
    std::snprintf(class_name, sizeof(class_name), "c%02d_%s", c,
                  kShapeNames[shape]);
    const fs::path class_dir = root / class_name;
    fs::create_directories(class_dir);

    for (int o = 0; o < spec.objects_per_class; ++o) {
      char object_name[16];
      std::snprintf(object_name, sizeof(object_name), "obj%03d", o);
      const fs::path object_dir = class_dir / object_name;
      fs::create_directories(object_dir);

      const int object_index = c * spec.objects_per_class + o;
      std::mt19937_64 obj_rng(mix_seed(seed, 1000003ull * object_index));
      std::uniform_real_distribution<double> unit(-1.0, 1.0);
      const double scale_jitter = 1.0 + 0.12 * unit(obj_rng);
      const double radius = 0.31 * S * scale_jitter;
      const double cx = 0.5 * S + 0.07 * S * unit(obj_rng);
      const double cy = 0.5 * S + 0.07 * S * unit(obj_rng);

      for (int v = 0; v < spec.views_per_object; ++v) {
        std::mt19937_64 view_rng(
            mix_seed(seed, 1000003ull * object_index + 7919ull * (v + 1)));
        std::normal_distribution<double> noise(0.0, 16.0);
        std::uniform_real_distribution<double> fg_dist(165.0, 235.0);
        std::uniform_real_distribution<double> bg_dist(5.0, 45.0);
        // Per-view lighting: keeps raw-intensity shortcuts from working.
        const double fg = fg_dist(view_rng);
        const double bg = bg_dist(view_rng);
        const double theta = 2.0 * M_PI * v / spec.views_per_object;
        const double ct = std::cos(theta), st = std::sin(theta);

        Image img;
        img.h = img.w = S;
        img.pixels.resize(static_cast<std::size_t>(S) * S);
        for (int y = 0; y < S; ++y) {
          for (int x = 0; x < S; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double u = (dx * ct + dy * st) / radius;
            const double w = (-dx * st + dy * ct) / radius;
            const double margin_px = shape_margin(shape, u, w) * radius;
            const double alpha = std::clamp(margin_px / 1.2, 0.0, 1.0);
            const double value = bg + (fg - bg) * alpha + noise(view_rng);
            img.pixels[static_cast<std::size_t>(y) * S + x] =
                static_cast<std::uint8_t>(std::clamp(value, 0.0, 255.0));
          }
        }
        char view_name[16];
        std::snprintf(view_name, sizeof(view_name), "%03d.pgm", v);
        write_pgm(img, object_dir / view_name);
      }
      manifest << class_name << " " << object_name << " "
               << spec.views_per_object << "\n";
    }
  }
  if (!manifest) throw IoError("failed writing manifest in " + root.string());
}

}  // namespace mdpcnn
