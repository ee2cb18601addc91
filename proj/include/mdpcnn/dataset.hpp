#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mdpcnn/errors.hpp"

namespace mdpcnn {

struct Image {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

Image read_pgm(const std::filesystem::path& path);
void write_pgm(const Image& img, const std::filesystem::path& path);

// One 3D object as an ordered set of labeled 2D views.
struct MultiViewObject {
  std::string id;  // "<class>/<object>"
  std::string class_name;
  int class_index = -1;
  std::vector<Image> views;
};

struct Corpus {
  std::vector<std::string> classes;      // sorted class names
  std::vector<MultiViewObject> objects;  // sorted by id
  int view_h = 0;
  int view_w = 0;

  int find_object(const std::string& id) const;  // -1 when absent
  int find_class(const std::string& name) const;
};

// Loads `root/<class>/<object>/<view_index>.pgm`. Views are sorted by
// numeric index and must be contiguous; image dimensions must agree across
// the corpus; every object needs at least 3 views.
Corpus load_corpus(const std::filesystem::path& root);

struct SplitSpec {
  double train_fraction = 0.8;
};

// Per-object prefix/suffix split: the first floor(fraction * V) views train,
// the rest test.
std::pair<Corpus, Corpus> split(const Corpus& corpus, const SplitSpec& spec);

struct SynthSpec {
  int num_classes = 8;
  int objects_per_class = 10;
  int views_per_object = 20;
  int image_size = 64;
};

// Writes a synthetic multi-view corpus: one parametric shape per class
// (cycled), per-object scale/position jitter, views rendered at evenly
// spaced rotation angles with pixel noise. Byte-identical per seed.
void synth_generate(const SynthSpec& spec, std::uint64_t seed,
                    const std::filesystem::path& root);

}  // namespace mdpcnn
