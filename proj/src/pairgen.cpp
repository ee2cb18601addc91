#include "mdpcnn/pairgen.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

namespace mdpcnn {

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  const unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
  if (p > static_cast<unsigned __int128>(UINT64_MAX)) {
    throw ConfigError("pair_space_size: result exceeds 64-bit range");
  }
  return static_cast<std::uint64_t>(p);
}

std::uint64_t binomial(long long n, long long k) {
  if (k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 acc = 1;
  for (long long i = 1; i <= k; ++i) {
    acc = acc * static_cast<unsigned __int128>(n - k + i);
    acc /= static_cast<unsigned __int128>(i);
    if (acc > static_cast<unsigned __int128>(UINT64_MAX)) {
      throw ConfigError("pair_space_size: binomial exceeds 64-bit range");
    }
  }
  return static_cast<std::uint64_t>(acc);
}

}  // namespace

std::uint64_t pair_space_size(long long num_objects, long long views_per_object,
                              long long group_size) {
  if (num_objects < 2) {
    throw ConfigError("pair_space_size: need at least 2 objects");
  }
  if (group_size < 1 || views_per_object < group_size) {
    throw ConfigError("pair_space_size: views per object " +
                      std::to_string(views_per_object) +
                      " is smaller than group size " +
                      std::to_string(group_size));
  }
  return checked_mul(binomial(views_per_object, group_size),
                     binomial(num_objects, 2));
}

std::vector<GroupPairRecord> generate_pairs(const std::vector<ViewGroup>& groups,
                                            const PairQuota& quota) {
  quota.validate();
  const int n = static_cast<int>(groups.size());
  if (n < 2) throw UsageError("generate_pairs: need at least 2 groups");

  std::vector<std::pair<int, int>> positive_pool, negative_pool;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (groups[i].class_index == groups[j].class_index) {
        positive_pool.emplace_back(i, j);
      } else {
        negative_pool.emplace_back(i, j);
      }
    }
  }
  if (quota.num_positive > 0 && positive_pool.empty()) {
    throw ConfigError(
        "generate_pairs: positives requested but no same-class object pair "
        "exists");
  }
  if (quota.num_negative > 0 && negative_pool.empty()) {
    throw ConfigError(
        "generate_pairs: negatives requested but no cross-class object pair "
        "exists");
  }

  std::mt19937_64 rng(quota.seed);
  auto draw = [&rng](std::vector<std::pair<int, int>>& pool, long long want) {
    std::vector<std::pair<int, int>> out;
    out.reserve(static_cast<std::size_t>(want));
    std::shuffle(pool.begin(), pool.end(), rng);
    for (long long i = 0; i < want && i < static_cast<long long>(pool.size());
         ++i) {
      out.push_back(pool[i]);
    }
    if (want > static_cast<long long>(pool.size())) {
      // Pool exhausted; continue with replacement.
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (long long i = static_cast<long long>(pool.size()); i < want; ++i) {
        out.push_back(pool[pick(rng)]);
      }
    }
    return out;
  };

  std::vector<GroupPairRecord> records;
  records.reserve(static_cast<std::size_t>(quota.num_positive +
                                           quota.num_negative));
  auto emit = [&groups, &records](const std::pair<int, int>& gp) {
    const ViewGroup& a = groups[gp.first];
    const ViewGroup& b = groups[gp.second];
    GroupPairRecord r;
    r.object_a = a.object_index;
    r.object_b = b.object_index;
    r.class_a = a.class_index;
    r.class_b = b.class_index;
    r.views_a = a.view_ids;
    r.views_b = b.view_ids;
    r.label = pair_label(r.class_a, r.class_b);
    if (r.object_a == r.object_b) {
      throw UsageError("generate_pairs: pair of an object with itself");
    }
    records.push_back(std::move(r));
  };
  for (const auto& gp : draw(positive_pool, quota.num_positive)) emit(gp);
  for (const auto& gp : draw(negative_pool, quota.num_negative)) emit(gp);
  return records;
}

void write_pair_manifest(const std::filesystem::path& path,
                         const PairQuota& quota, const Corpus& corpus,
                         const std::vector<GroupPairRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "# num_positive=" << quota.num_positive
     << " num_negative=" << quota.num_negative << " seed=" << quota.seed
     << "\n";
  auto views_field = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ";";
      s += std::to_string(v[i]);
    }
    return s;
  };
  for (const GroupPairRecord& r : records) {
    os << corpus.objects.at(r.object_a).id << ","
       << corpus.objects.at(r.object_b).id << ","
       << corpus.classes.at(r.class_a) << "," << corpus.classes.at(r.class_b)
       << "," << views_field(r.views_a) << "," << views_field(r.views_b)
       << "," << r.label << "\n";
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<GroupPairRecord> read_pair_manifest(
    const std::filesystem::path& path, const Corpus& corpus) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<GroupPairRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": expected 7 fields, got " +
                    std::to_string(fields.size()));
    }
    GroupPairRecord r;
    r.object_a = corpus.find_object(fields[0]);
    r.object_b = corpus.find_object(fields[1]);
    if (r.object_a < 0 || r.object_b < 0) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": unknown object id");
    }
    r.class_a = corpus.find_class(fields[2]);
    r.class_b = corpus.find_class(fields[3]);
    if (r.class_a < 0 || r.class_b < 0) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": unknown class name");
    }
    auto parse_views = [](const std::string& s) {
      std::vector<int> v;
      std::istringstream vs(s);
      std::string tok;
      while (std::getline(vs, tok, ';')) v.push_back(std::stoi(tok));
      return v;
    };
    r.views_a = parse_views(fields[4]);
    r.views_b = parse_views(fields[5]);
    r.label = std::stoi(fields[6]);
    if (r.label != pair_label(r.class_a, r.class_b)) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": pair label contradicts class columns");
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace mdpcnn
