#pragma once

// Domains of class-indexed feature vectors, episodic sampling, a synthetic
// multi-domain generator, and dataset file I/O.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "featwise/errors.hpp"
#include "featwise/metric_heads.hpp"
#include "featwise/rng.hpp"
#include "featwise/tensor.hpp"

namespace featwise {

enum class Split { train, val, test };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

struct ClassSamples {
  std::vector<double> values;  // count x dim, row-major
  std::size_t count = 0;
  Split split = Split::train;
};

struct Domain {
  std::string name;
  std::size_t dim = 0;
  std::map<std::uint32_t, ClassSamples> classes;

  std::size_t class_count() const { return classes.size(); }

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& [id, c] : classes) n += c.count;
    return n;
  }

  std::vector<std::uint32_t> class_ids(std::optional<Split> split = std::nullopt) const {
    std::vector<std::uint32_t> ids;
    for (const auto& [id, c] : classes) {
      if (!split || c.split == *split) ids.push_back(id);
    }
    return ids;
  }

  std::span<const double> sample(std::uint32_t class_id, std::size_t index) const {
    const ClassSamples& c = classes.at(class_id);
    return std::span<const double>(c.values).subspan(index * dim, dim);
  }

  void validate() const {
    if (dim == 0) throw FormatError("domain '" + name + "': feature width must be positive");
    for (const auto& [id, c] : classes) {
      if (c.count == 0) throw FormatError("domain '" + name + "': class " + std::to_string(id) + " has no samples");
      if (c.values.size() != c.count * dim) {
        throw FormatError("domain '" + name + "': class " + std::to_string(id) + " has inconsistent sample width");
      }
    }
  }

  bool operator==(const Domain& other) const {
    if (name != other.name || dim != other.dim || classes.size() != other.classes.size()) return false;
    for (auto a = classes.begin(), b = other.classes.begin(); a != classes.end(); ++a, ++b) {
      if (a->first != b->first || a->second.count != b->second.count || a->second.split != b->second.split) {
        return false;
      }
      for (std::size_t i = 0; i < a->second.values.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a->second.values[i]) != std::bit_cast<std::uint64_t>(b->second.values[i])) {
          return false;
        }
      }
    }
    return true;
  }
};

// Classes of `domain` tagged with `split`, re-tagged as train.
inline Domain domain_subset(const Domain& domain, Split split, std::string name) {
  Domain out{std::move(name), domain.dim, {}};
  for (const auto& [id, c] : domain.classes) {
    if (c.split != split) continue;
    ClassSamples copy = c;
    copy.split = Split::train;
    out.classes.emplace(id, std::move(copy));
  }
  return out;
}

// Pools samples of equal class ids across domains.
inline Domain merge_domains(std::span<const Domain> domains, std::string name) {
  if (domains.empty()) throw ContractError("merge_domains: no domains");
  Domain out{std::move(name), domains.front().dim, {}};
  for (const Domain& d : domains) {
    if (d.dim != out.dim) throw DimensionError("merge_domains: feature widths differ");
    for (const auto& [id, c] : d.classes) {
      ClassSamples& dst = out.classes[id];
      dst.values.insert(dst.values.end(), c.values.begin(), c.values.end());
      dst.count += c.count;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

struct Episode {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::size_t query = 0;
  Tensor support_x;
  Labels support_y;
  Tensor query_x;
  Labels query_y;
  std::string domain;
  std::vector<std::uint32_t> class_ids;  // episode label k -> domain class id
  // Within-class sample indices, aligned with the rows of support_x / query_x.
  std::vector<std::size_t> support_index;
  std::vector<std::size_t> query_index;

  std::size_t support_rows() const { return support_y.size(); }
  std::size_t query_rows() const { return query_y.size(); }

  // Support rows followed by query rows.
  Tensor joint_x() const { return concat({support_x, query_x}, 0); }
};

inline Episode sample_episode(const Domain& domain, std::size_t way, std::size_t shot, std::size_t query, Rng& rng,
                              std::optional<Split> split = std::nullopt) {
  if (way == 0 || shot == 0 || query == 0) throw ContractError("sample_episode: way, shot and query must be positive");
  const std::vector<std::uint32_t> ids = domain.class_ids(split);
  if (ids.size() < way) {
    throw CapacityError("sample_episode: " + std::to_string(way) + "-way episode needs " + std::to_string(way) +
                        " classes but domain '" + domain.name + "' has " + std::to_string(ids.size()));
  }
  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.query = query;
  ep.domain = domain.name;

  const std::vector<std::size_t> picked = rng.choose(ids.size(), way);
  std::vector<double> sx, qx;
  sx.reserve(way * shot * domain.dim);
  qx.reserve(way * query * domain.dim);
  for (std::size_t k = 0; k < way; ++k) {
    const std::uint32_t cid = ids[picked[k]];
    const ClassSamples& cls = domain.classes.at(cid);
    if (cls.count < shot + query) {
      throw CapacityError("sample_episode: class " + std::to_string(cid) + " of domain '" + domain.name + "' has " +
                          std::to_string(cls.count) + " samples, needs " + std::to_string(shot + query));
    }
    ep.class_ids.push_back(cid);
    const std::vector<std::size_t> rows = rng.choose(cls.count, shot + query);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const auto x = domain.sample(cid, rows[j]);
      if (j < shot) {
        sx.insert(sx.end(), x.begin(), x.end());
        ep.support_y.push_back(k);
        ep.support_index.push_back(rows[j]);
      } else {
        qx.insert(qx.end(), x.begin(), x.end());
        ep.query_y.push_back(k);
        ep.query_index.push_back(rows[j]);
      }
    }
  }
  ep.support_x = Tensor::matrix(way * shot, domain.dim, std::move(sx));
  ep.query_x = Tensor::matrix(way * query, domain.dim, std::move(qx));
  return ep;
}

// Partitions classes into train/val/test by shuffled order. Val and test sizes
// are rounded; the remainder goes to train.
inline Domain split_classes(const Domain& domain, std::array<double, 3> fractions, Rng& rng) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ContractError("split_classes: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("split_classes: fractions must sum to 1");
  std::vector<std::uint32_t> ids = domain.class_ids();
  const std::size_t k = ids.size();
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(k) * fractions[1]));
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(k) * fractions[2]));
  if (n_val + n_test > k) throw CapacityError("split_classes: not enough classes for the requested fractions");
  const std::size_t n_train = k - n_val - n_test;
  const std::array<std::size_t, 3> sizes{n_train, n_val, n_test};
  if (k >= 3) {
    for (std::size_t s = 0; s < 3; ++s) {
      if (fractions[s] > 0.0 && sizes[s] == 0) {
        throw CapacityError("split_classes: split '" + std::string(split_name(static_cast<Split>(s))) +
                            "' would receive no classes out of " + std::to_string(k));
      }
    }
  }
  rng.shuffle(ids);
  Domain out = domain;
  for (std::size_t i = 0; i < k; ++i) {
    const Split s = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    out.classes.at(ids[i]).split = s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic domains
//
// Class prototypes c_y ~ N(0, I_latent) come from the master seed, so every
// domain generated with the same master seed shares the same classes. Each
// domain seed draws its own warp: a mixing matrix A_d (observed x latent),
// per-feature scale s_d and shift b_d. A sample of class y is
//   x = tanh(A_d (c_y + noise)) * s_d + b_d,   noise ~ N(0, sigma^2 I).
// `warp` blends A_d between a matrix shared by all domains (0) and a
// domain-specific one, and scales how far s_d and b_d move from 1 and 0.

struct SyntheticDomainSpec {
  std::uint64_t master_seed = 0;
  std::uint64_t domain_seed = 1;
  std::size_t num_classes = 20;
  std::size_t latent_dim = 8;
  std::size_t observed_dim = 16;
  std::size_t per_class = 50;
  double noise = 0.5;
  double warp = 1.0;
  std::string name;
};

inline Domain generate_synthetic_domain(const SyntheticDomainSpec& spec) {
  if (spec.latent_dim == 0 || spec.observed_dim < spec.latent_dim) {
    throw ConfigError("synthetic domain: need observed_dim >= latent_dim >= 1");
  }
  if (spec.num_classes == 0 || spec.per_class == 0) throw ConfigError("synthetic domain: empty class layout");
  const std::size_t k = spec.latent_dim, d = spec.observed_dim;

  const Rng master(spec.master_seed);
  Rng proto_rng = master.substream("prototypes");
  std::vector<double> protos(spec.num_classes * k);
  for (double& v : protos) v = proto_rng.normal();

  Rng shared_rng = master.substream("shared-mixing");
  const Rng domain(spec.domain_seed);
  Rng warp_rng = domain.substream("warp");
  const double w = spec.warp;
  const double norm = 1.0 / std::sqrt(static_cast<double>(k) * (1.0 + w * w));
  std::vector<double> mixing(d * k);
  for (double& v : mixing) {
    const double shared = shared_rng.normal();
    v = (shared + w * warp_rng.normal()) * norm;
  }
  std::vector<double> feature_scale(d), feature_shift(d);
  for (double& s : feature_scale) s = std::exp(0.5 * w * warp_rng.normal());
  for (double& b : feature_shift) b = 0.5 * w * warp_rng.normal();

  Domain out;
  out.name = spec.name.empty() ? "synthetic-" + std::to_string(spec.domain_seed) : spec.name;
  out.dim = d;
  std::vector<double> latent(k);
  for (std::size_t y = 0; y < spec.num_classes; ++y) {
    Rng sample_rng = domain.substream("samples", y);
    ClassSamples cls;
    cls.count = spec.per_class;
    cls.values.reserve(spec.per_class * d);
    for (std::size_t m = 0; m < spec.per_class; ++m) {
      for (std::size_t j = 0; j < k; ++j) latent[j] = protos[y * k + j] + spec.noise * sample_rng.normal();
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) acc += mixing[i * k + j] * latent[j];
        cls.values.push_back(std::tanh(acc) * feature_scale[i] + feature_shift[i]);
      }
    }
    out.classes.emplace(static_cast<std::uint32_t>(y), std::move(cls));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset files

enum class DatasetFormat { csv, binary };

inline DatasetFormat format_for_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? DatasetFormat::csv : DatasetFormat::binary;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

// Little-endian reader over an in-memory buffer; running past the end is a LengthError.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw LengthError(std::string("truncated file while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

}  // namespace detail

inline constexpr char kDatasetMagic[4] = {'F', 'S', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::string encode_domain_binary(const Domain& domain) {
  std::string out(kDatasetMagic, 4);
  detail::put_u32(out, kDatasetVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(domain.classes.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(domain.dim));
  for (const auto& [id, c] : domain.classes) {
    detail::put_u32(out, id);
    detail::put_u32(out, static_cast<std::uint32_t>(c.count));
    for (double v : c.values) detail::put_f64(out, v);
  }
  return out;
}

inline Domain decode_domain_binary(std::string_view bytes, std::string name) {
  detail::ByteReader in(bytes);
  if (in.bytes(4, "magic") != std::string_view(kDatasetMagic, 4)) throw FormatError("dataset: bad magic (expected FSDS)");
  const std::uint32_t version = in.u32("version");
  if (version != kDatasetVersion) throw FormatError("dataset: unsupported version " + std::to_string(version));
  const std::uint32_t class_count = in.u32("class count");
  Domain d;
  d.name = std::move(name);
  d.dim = in.u32("dim");
  for (std::uint32_t c = 0; c < class_count; ++c) {
    const std::uint32_t id = in.u32("class id");
    ClassSamples cls;
    cls.count = in.u32("sample count");
    cls.values.resize(cls.count * d.dim);
    for (double& v : cls.values) v = in.f64("sample values");
    if (!d.classes.emplace(id, std::move(cls)).second) {
      throw FormatError("dataset: duplicate class id " + std::to_string(id));
    }
  }
  if (!in.at_end()) throw FormatError("dataset: trailing bytes after last class");
  d.validate();
  return d;
}

inline std::string encode_domain_csv(const Domain& domain) {
  std::string out = "class_id";
  for (std::size_t j = 0; j < domain.dim; ++j) out += ",f" + std::to_string(j);
  out += '\n';
  for (const auto& [id, c] : domain.classes) {
    for (std::size_t m = 0; m < c.count; ++m) {
      out += std::to_string(id);
      for (std::size_t j = 0; j < domain.dim; ++j) {
        out += ',';
        out += detail::format_double(c.values[m * domain.dim + j]);
      }
      out += '\n';
    }
  }
  return out;
}

inline Domain decode_domain_csv(std::string_view text, std::string name) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = end + 1;
    ++line_no;
    return true;
  };
  std::string_view line;
  if (!next_line(line)) throw ParseError("dataset csv: missing header");
  const auto header = detail::split_fields(line);
  if (header.size() < 2 || header.front() != "class_id") {
    throw ParseError("dataset csv: header must be class_id,f0,...");
  }
  Domain d;
  d.name = std::move(name);
  d.dim = header.size() - 1;
  while (next_line(line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_fields(line);
    if (fields.size() != header.size()) {
      throw ParseError("dataset csv: line " + std::to_string(line_no) + " has " + std::to_string(fields.size() - 1) +
                       " features, header declares " + std::to_string(d.dim));
    }
    std::uint32_t id = 0;
    auto r = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), id);
    if (r.ec != std::errc() || r.ptr != fields[0].data() + fields[0].size()) {
      throw ParseError("dataset csv: line " + std::to_string(line_no) + " has an invalid class id");
    }
    ClassSamples& cls = d.classes[id];
    for (std::size_t j = 1; j < fields.size(); ++j) {
      double v = 0.0;
      auto rv = std::from_chars(fields[j].data(), fields[j].data() + fields[j].size(), v);
      if (rv.ec != std::errc() || rv.ptr != fields[j].data() + fields[j].size()) {
        throw ParseError("dataset csv: line " + std::to_string(line_no) + " field " + std::to_string(j) +
                         " is not a number");
      }
      cls.values.push_back(v);
    }
    ++cls.count;
  }
  d.validate();
  return d;
}

inline void save_domain(const Domain& domain, const std::filesystem::path& path, DatasetFormat format) {
  detail::write_file(path, format == DatasetFormat::csv ? encode_domain_csv(domain) : encode_domain_binary(domain));
}

inline void save_domain(const Domain& domain, const std::filesystem::path& path) {
  save_domain(domain, path, format_for_path(path));
}

// The domain is named after the file stem.
inline Domain load_domain(const std::filesystem::path& path, DatasetFormat format) {
  const std::string bytes = detail::read_file(path);
  std::string name = path.stem().string();
  return format == DatasetFormat::csv ? decode_domain_csv(bytes, std::move(name))
                                      : decode_domain_binary(bytes, std::move(name));
}

inline Domain load_domain(const std::filesystem::path& path) { return load_domain(path, format_for_path(path)); }

}  // namespace featwise
