#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mdpcnn/errors.hpp"
#include "mdpcnn/graph.hpp"
#include "mdpcnn/losses.hpp"
#include "mdpcnn/tensor.hpp"

namespace mdpcnn {

// Twin-chain layout: five 3x3/stride-1/pad-1 conv blocks with ReLU, 2x2
// stride-2 max-pool after blocks 1-4; slice -> view pool -> one final 2x2
// max-pool -> concat -> flatten -> FC1 -> ReLU -> FC2 embedding.
struct NetworkConfig {
  std::array<int, 5> conv_channels{32, 64, 128, 256, 512};
  int input_h = 64;
  int input_w = 64;
  int input_channels = 1;
  int views_per_group = 3;
  int batch_size = 12;
  int fc1_width = 512;
  int embedding_dim = 128;
  int num_classes = 0;  // rows of the class-center bank

  static NetworkConfig eth_preset() {
    NetworkConfig c;
    c.conv_channels = {16, 32, 64, 128, 256};
    return c;
  }

  void validate() const {
    for (int ch : conv_channels) {
      if (ch < 1) throw ConfigError("network: conv channels must be >= 1");
    }
    if (input_h < 1 || input_w < 1 || input_channels < 1) {
      throw ConfigError("network: invalid input size");
    }
    if (views_per_group < 1) throw ConfigError("network: views_per_group must be >= 1");
    if (batch_size < 1) throw ConfigError("network: batch_size must be >= 1");
    if (fc1_width < 1) throw ConfigError("network: fc1_width must be >= 1");
    if (embedding_dim < 2) throw ConfigError("network: embedding_dim must be >= 2");
  }

  // Spatial dims after each of the five conv blocks (post block-pool for
  // blocks 1-4) and after the final post-view-pool max-pool. Throws a
  // ConfigError naming the first layer whose output collapses.
  struct Dims {
    std::array<std::pair<int, int>, 5> after_block;
    int final_h = 0;
    int final_w = 0;
    int flatten_dim = 0;
  };
  Dims layer_dims() const {
    Dims d;
    int h = input_h, w = input_w;
    for (int i = 0; i < 5; ++i) {
      // 3x3 conv, pad 1, stride 1 preserves spatial dims.
      if (i < 4) {
        if (h < 2 || w < 2) {
          throw ConfigError("network: conv block " + std::to_string(i + 1) +
                            " output " + std::to_string(h) + "x" +
                            std::to_string(w) + " cannot be max-pooled");
        }
        h = (h - 2) / 2 + 1;
        w = (w - 2) / 2 + 1;
      }
      d.after_block[i] = {h, w};
    }
    if (h < 2 || w < 2) {
      throw ConfigError("network: view-pool output " + std::to_string(h) +
                        "x" + std::to_string(w) +
                        " cannot take the final max-pool");
    }
    d.final_h = (h - 2) / 2 + 1;
    d.final_w = (w - 2) / 2 + 1;
    d.flatten_dim = conv_channels[4] * d.final_h * d.final_w;
    return d;
  }
};

// All learnable state, shared by both chains. The center bank trains with
// the network and persists in the same weights file.
template <typename T>
struct ModelWeights {
  NetworkConfig config;
  std::array<Tensor4<T>, 5> conv_w;
  std::array<Tensor4<T>, 5> conv_b;
  Tensor4<T> fc1_w, fc1_b, fc2_w, fc2_b;
  CenterBank<T> centers;

  std::vector<std::pair<std::string, Tensor4<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor4<T>*>> out;
    for (int i = 0; i < 5; ++i) {
      out.emplace_back("conv" + std::to_string(i + 1) + "_w", &conv_w[i]);
      out.emplace_back("conv" + std::to_string(i + 1) + "_b", &conv_b[i]);
    }
    out.emplace_back("fc1_w", &fc1_w);
    out.emplace_back("fc1_b", &fc1_b);
    out.emplace_back("fc2_w", &fc2_w);
    out.emplace_back("fc2_b", &fc2_b);
    out.emplace_back("centers", &centers.centers);
    return out;
  }
};

// He fan-in initialization for conv and FC weights, zero biases, zero
// centers. Same seed gives bit-identical weights.
template <typename T>
ModelWeights<T> build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  const auto dims = config.layer_dims();
  ModelWeights<T> m;
  m.config = config;
  std::mt19937_64 rng(seed);
  auto he = [&rng](Tensor4<T>& t, int fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (T& v : t.data) v = static_cast<T>(dist(rng));
  };
  int in_ch = config.input_channels;
  for (int i = 0; i < 5; ++i) {
    const int out_ch = config.conv_channels[i];
    m.conv_w[i] = Tensor4<T>::zeros(out_ch, in_ch, 3, 3);
    he(m.conv_w[i], in_ch * 9);
    m.conv_b[i] = Tensor4<T>::zeros(out_ch, 1, 1, 1);
    in_ch = out_ch;
  }
  m.fc1_w = Tensor4<T>::zeros(config.fc1_width, dims.flatten_dim, 1, 1);
  he(m.fc1_w, dims.flatten_dim);
  m.fc1_b = Tensor4<T>::zeros(config.fc1_width, 1, 1, 1);
  m.fc2_w = Tensor4<T>::zeros(config.embedding_dim, config.fc1_width, 1, 1);
  he(m.fc2_w, config.fc1_width);
  m.fc2_b = Tensor4<T>::zeros(config.embedding_dim, 1, 1, 1);
  m.centers = CenterBank<T>::zeros(std::max(config.num_classes, 1),
                                   config.embedding_dim);
  return m;
}

// Weight variables registered on a graph. Registering once and feeding both
// chains the same handles is what shares the weights: gradient
// contributions from the two chains accumulate into the same tensors.
template <typename T>
struct ChainVars {
  std::array<typename Graph<T>::Var, 5> conv_w{};
  std::array<typename Graph<T>::Var, 5> conv_b{};
  typename Graph<T>::Var fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
};

template <typename T>
ChainVars<T> register_weights(Graph<T>& g, const ModelWeights<T>& m) {
  ChainVars<T> v;
  for (int i = 0; i < 5; ++i) {
    v.conv_w[i] = g.param(m.conv_w[i]);
    v.conv_b[i] = g.param(m.conv_b[i]);
  }
  v.fc1_w = g.param(m.fc1_w);
  v.fc1_b = g.param(m.fc1_b);
  v.fc2_w = g.param(m.fc2_w);
  v.fc2_b = g.param(m.fc2_b);
  return v;
}

// One chain on an existing graph: views (N = B*V) in, embeddings (B, d) out.
template <typename T>
typename Graph<T>::Var forward_chain_graph(Graph<T>& g,
                                           const NetworkConfig& config,
                                           const ChainVars<T>& w,
                                           typename Graph<T>::Var views) {
  using Var = typename Graph<T>::Var;
  const int N = g.value(views).shape.n;
  const int V = config.views_per_group;
  if (N % V != 0) {
    throw UsageError("forward_chain: N = " + std::to_string(N) +
                     " is not divisible by views_per_group = " +
                     std::to_string(V));
  }
  const int B = N / V;

  Var x = views;
  for (int i = 0; i < 5; ++i) {
    x = g.conv2d(x, w.conv_w[i], w.conv_b[i], /*stride=*/1, /*pad=*/1);
    x = g.relu(x);
    if (i < 4) x = g.maxpool2d(x, 2, 2);
  }

  std::vector<Var> groups = g.slice_batch(x, std::vector<int>(B, V));
  std::vector<Var> pooled;
  pooled.reserve(B);
  for (Var group : groups) {
    std::vector<Var> singles =
        g.slice_batch(group, std::vector<int>(V, 1));
    Var vp = g.view_pool(singles);
    pooled.push_back(g.maxpool2d(vp, 2, 2));
  }
  Var cat = g.concat_batch(pooled);
  Var flat = g.flatten(cat);
  Var h = g.relu(g.fully_connected(flat, w.fc1_w, w.fc1_b));
  return g.fully_connected(h, w.fc2_w, w.fc2_b);
}

// Convenience forward with no gradient bookkeeping wanted by callers.
template <typename T>
Tensor4<T> forward_chain(const ModelWeights<T>& weights,
                         const Tensor4<T>& views) {
  Graph<T> g;
  ChainVars<T> w = register_weights(g, weights);
  auto out = forward_chain_graph(g, weights.config, w, g.input(views));
  return g.value(out);
}

// One labeled batch of group pairs. Views are stacked group-contiguously:
// pair i's V views occupy samples [i*V, (i+1)*V) on each chain.
template <typename T>
struct GroupPairBatch {
  Tensor4<T> views_a;
  Tensor4<T> views_b;
  std::vector<int> labels_a;     // per-group class index
  std::vector<int> labels_b;
  std::vector<int> pair_labels;  // y_i = 1 iff labels match

  void validate(int views_per_group) const {
    const int B = static_cast<int>(pair_labels.size());
    if (labels_a.size() != pair_labels.size() ||
        labels_b.size() != pair_labels.size()) {
      throw UsageError("group pair batch: label arrays disagree on size");
    }
    if (views_a.shape.n != B * views_per_group ||
        views_b.shape.n != B * views_per_group) {
      throw UsageError("group pair batch: expected N = " +
                       std::to_string(B * views_per_group) + " views, got " +
                       views_a.shape.str() + " / " + views_b.shape.str());
    }
    for (int i = 0; i < B; ++i) {
      const int expect = labels_a[i] == labels_b[i] ? 1 : 0;
      if (pair_labels[i] != expect) {
        throw UsageError("group pair batch: pair label " +
                         std::to_string(pair_labels[i]) +
                         " contradicts group labels at row " +
                         std::to_string(i));
      }
    }
  }
};

// Both chains evaluated with the identical weights.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> forward_pair(const ModelWeights<T>& weights,
                                               const GroupPairBatch<T>& batch) {
  batch.validate(weights.config.views_per_group);
  Graph<T> g;
  ChainVars<T> w = register_weights(g, weights);
  auto a = forward_chain_graph(g, weights.config, w, g.input(batch.views_a));
  auto b = forward_chain_graph(g, weights.config, w, g.input(batch.views_b));
  return {g.value(a), g.value(b)};
}

// --- weight persistence ---------------------------------------------------
//
// File layout: magic "MDPW", u32 version = 1, u32 tensor count, then per
// tensor: u32 name length, name bytes, u32 rank, u32 dims, raw f32
// little-endian payload.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("weights file truncated");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

// Dims recorded per tensor, dropping trailing 1s down to the natural rank
// (kernel banks rank 4, matrices rank 2, vectors rank 1).
inline std::vector<std::uint32_t> natural_dims(const Shape4& s) {
  std::vector<std::uint32_t> d{static_cast<std::uint32_t>(s.n),
                               static_cast<std::uint32_t>(s.k),
                               static_cast<std::uint32_t>(s.h),
                               static_cast<std::uint32_t>(s.w)};
  while (d.size() > 1 && d.back() == 1) d.pop_back();
  return d;
}

}  // namespace detail

template <typename T>
void save_weights(const ModelWeights<T>& m_in,
                  const std::filesystem::path& path) {
  auto& m = const_cast<ModelWeights<T>&>(m_in);
  auto tensors = m.named_tensors();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write("MDPW", 4);
  detail::put_u32(os, 1);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (auto& [name, tensor] : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto dims = detail::natural_dims(tensor->shape);
    detail::put_u32(os, static_cast<std::uint32_t>(dims.size()));
    for (std::uint32_t d : dims) detail::put_u32(os, d);
    for (const T& v : tensor->data) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(os, bits);
    }
  }
  if (!os) throw IoError("failed writing " + path.string());
}

// Loads and validates against the expected configuration; a zero
// config.num_classes accepts whatever center bank the file carries.
template <typename T>
ModelWeights<T> load_weights(const std::filesystem::path& path,
                             const NetworkConfig& config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MDPW", 4) != 0) {
    throw IoError(path.string() + ": not a weights file (bad magic)");
  }
  const std::uint32_t version = detail::get_u32(is);
  if (version != 1) {
    throw IoError(path.string() + ": unsupported weights version " +
                  std::to_string(version));
  }
  const std::uint32_t count = detail::get_u32(is);

  struct Entry {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
  };
  std::map<std::string, Entry> entries;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = detail::get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw IoError("weights file truncated");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank < 1 || rank > 4) {
      throw IoError(path.string() + ": tensor " + name + " has bad rank " +
                    std::to_string(rank));
    }
    Entry e;
    std::size_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.dims.push_back(detail::get_u32(is));
      total *= e.dims.back();
    }
    e.data.resize(total);
    for (std::size_t i = 0; i < total; ++i) {
      const std::uint32_t bits = detail::get_u32(is);
      std::memcpy(&e.data[i], &bits, 4);
    }
    entries[name] = std::move(e);
  }

  NetworkConfig cfg = config;
  if (cfg.num_classes == 0) {
    auto it = entries.find("centers");
    if (it != entries.end() && !it->second.dims.empty()) {
      cfg.num_classes = static_cast<int>(it->second.dims[0]);
    }
  }
  ModelWeights<T> m = build<T>(cfg, 0);

  for (auto& [name, tensor] : m.named_tensors()) {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw IoError(path.string() + ": missing tensor " + name);
    }
    const auto expect = detail::natural_dims(tensor->shape);
    if (it->second.dims != expect) {
      auto fmt = [](const std::vector<std::uint32_t>& d) {
        std::string s;
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (i) s += "x";
          s += std::to_string(d[i]);
        }
        return s;
      };
      throw IoError(path.string() + ": tensor " + name + " has shape " +
                    fmt(it->second.dims) + ", expected " + fmt(expect));
    }
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      tensor->data[i] = static_cast<T>(it->second.data[i]);
    }
  }
  return m;
}

}  // namespace mdpcnn
