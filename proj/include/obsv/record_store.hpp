/*
 * Copyright 2026 The obsv Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef OBSV_RECORD_STORE_HPP_
#define OBSV_RECORD_STORE_HPP_

// Token-level activation records and the OBSA v1 shard container.
//
// Layout (little-endian, no padding):
//   "OBSA" | u16 version=1 | u32 metadata_len | metadata (UTF-8 JSON text)
//   | u64 n_tokens | u32 d
//   | doc_id u32[n] | position u32[n] | token_id u32[n]
//   | loss f32[n] | max_softmax f32[n] | logit_entropy f32[n]
//   | activations f32[n*d] (row-major)

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "obsv/error.hpp"
#include "obsv/rng.hpp"

namespace obsv {

inline constexpr std::array<char, 4> kShardMagic = {'O', 'B', 'S', 'A'};
inline constexpr std::uint16_t kShardVersion = 1;
// Bytes per token outside the activation payload: 3 u32 + 3 f32 columns.
inline constexpr std::size_t kFixedColumnBytes = 6 * 4;

struct TokenRecord {
  std::uint32_t doc_id = 0;
  std::uint32_t position = 0;
  std::uint32_t token_id = 0;
  float loss = 0.0f;
  float max_softmax = 1.0f;
  float logit_entropy = 0.0f;
  std::vector<float> activation;
};

// Columnar token store for one (model, layer, checkpoint, split). Immutable
// once loaded; every downstream module reads from here.
class RecordSet {
 public:
  RecordSet() = default;
  explicit RecordSet(std::uint32_t d) : d_(d) {}

  std::size_t size() const { return loss_.size(); }
  bool empty() const { return loss_.empty(); }
  std::uint32_t dim() const { return d_; }

  void reserve(std::size_t n) {
    doc_id_.reserve(n);
    position_.reserve(n);
    token_id_.reserve(n);
    loss_.reserve(n);
    max_softmax_.reserve(n);
    logit_entropy_.reserve(n);
    activations_.reserve(n * d_);
  }

  void push_back(std::uint32_t doc_id, std::uint32_t position,
                 std::uint32_t token_id, float loss, float max_softmax,
                 float logit_entropy, std::span<const float> activation) {
    if (activation.size() != d_) {
      throw SchemaError("activation length " + std::to_string(activation.size()) +
                        " does not match d=" + std::to_string(d_));
    }
    doc_id_.push_back(doc_id);
    position_.push_back(position);
    token_id_.push_back(token_id);
    loss_.push_back(loss);
    max_softmax_.push_back(max_softmax);
    logit_entropy_.push_back(logit_entropy);
    activations_.insert(activations_.end(), activation.begin(), activation.end());
  }

  void push_back(const TokenRecord& r) {
    push_back(r.doc_id, r.position, r.token_id, r.loss, r.max_softmax,
              r.logit_entropy, r.activation);
  }

  TokenRecord record(std::size_t i) const {
    TokenRecord r;
    r.doc_id = doc_id_[i];
    r.position = position_[i];
    r.token_id = token_id_[i];
    r.loss = loss_[i];
    r.max_softmax = max_softmax_[i];
    r.logit_entropy = logit_entropy_[i];
    const auto row_span = row(i);
    r.activation.assign(row_span.begin(), row_span.end());
    return r;
  }

  std::span<const float> row(std::size_t i) const {
    return {activations_.data() + i * d_, d_};
  }

  std::span<const std::uint32_t> doc_ids() const { return doc_id_; }
  std::span<const std::uint32_t> positions() const { return position_; }
  std::span<const std::uint32_t> token_ids() const { return token_id_; }
  std::span<const float> losses() const { return loss_; }
  std::span<const float> max_softmax() const { return max_softmax_; }
  std::span<const float> logit_entropy() const { return logit_entropy_; }
  std::span<const float> activations() const { return activations_; }

  // Columns widened to double for the numerical modules.
  Eigen::VectorXd loss_vector() const { return widen(loss_); }
  Eigen::VectorXd max_softmax_vector() const { return widen(max_softmax_); }
  Eigen::VectorXd logit_entropy_vector() const { return widen(logit_entropy_); }

  // n x d activation matrix in double precision.
  Eigen::MatrixXd activation_matrix() const {
    Eigen::MatrixXd m(size(), d_);
    for (std::size_t i = 0; i < size(); ++i) {
      for (std::uint32_t j = 0; j < d_; ++j) m(i, j) = activations_[i * d_ + j];
    }
    return m;
  }

  RecordSet subset(std::span<const std::size_t> indices) const {
    RecordSet out(d_);
    out.reserve(indices.size());
    for (std::size_t i : indices) {
      out.push_back(doc_id_[i], position_[i], token_id_[i], loss_[i],
                    max_softmax_[i], logit_entropy_[i], row(i));
    }
    return out;
  }

  bool operator==(const RecordSet&) const = default;

 private:
  static Eigen::VectorXd widen(const std::vector<float>& v) {
    Eigen::VectorXd out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i];
    return out;
  }

  std::uint32_t d_ = 0;
  std::vector<std::uint32_t> doc_id_;
  std::vector<std::uint32_t> position_;
  std::vector<std::uint32_t> token_id_;
  std::vector<float> loss_;
  std::vector<float> max_softmax_;
  std::vector<float> logit_entropy_;
  std::vector<float> activations_;
};

// Metadata keys: model, layer, n_layers, d, step, split, dtype, entropy_unit.
struct ShardHeader {
  std::uint16_t version = kShardVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::uint64_t n_tokens = 0;
  std::uint32_t d = 0;

  bool operator==(const ShardHeader&) const = default;
};

struct Shard {
  ShardHeader header;
  RecordSet records;
};

inline nlohmann::json make_metadata(std::string model, int layer, int n_layers,
                                    std::uint32_t d, std::int64_t step,
                                    std::string split) {
  return {{"model", std::move(model)}, {"layer", layer},
          {"n_layers", n_layers},      {"d", d},
          {"step", step},              {"split", std::move(split)},
          {"dtype", "f32"},            {"entropy_unit", "nats"}};
}

inline ShardHeader make_header(const RecordSet& records,
                               nlohmann::json metadata = nlohmann::json::object()) {
  ShardHeader h;
  h.n_tokens = records.size();
  h.d = records.dim();
  if (!metadata.contains("dtype")) metadata["dtype"] = "f32";
  if (!metadata.contains("entropy_unit")) metadata["entropy_unit"] = "nats";
  if (!metadata.contains("d")) metadata["d"] = records.dim();
  h.metadata = std::move(metadata);
  return h;
}

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename UInt>
  void uint(UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
    }
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  std::vector<unsigned char> take() { return std::move(buf_); }
  void reserve(std::size_t n) { buf_.reserve(n); }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> data) : data_(data) {}

  std::size_t remaining() const { return data_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw CorruptionError(std::string("shard truncated while reading ") + what +
                            ": need " + std::to_string(n) + " bytes, have " +
                            std::to_string(remaining()));
    }
  }
  template <typename UInt>
  UInt uint(const char* what) {
    need(sizeof(UInt), what);
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
      v |= static_cast<UInt>(data_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(UInt);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  std::string_view text(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const unsigned char> data_;
  std::size_t pos_ = 0;
};

inline void check_metadata(const ShardHeader& h) {
  if (!h.metadata.is_object()) throw FormatError("shard metadata must be a JSON object");
  if (h.metadata.contains("dtype")) {
    const auto& dtype = h.metadata["dtype"];
    if (!dtype.is_string() || dtype.get<std::string>() != "f32") {
      throw FormatError("unsupported activation dtype " + dtype.dump() +
                        " (version 1 requires f32)");
    }
  }
  if (h.metadata.contains("d")) {
    const auto& md = h.metadata["d"];
    if (!md.is_number_unsigned() && !md.is_number_integer()) {
      throw SchemaError("metadata field d is not an integer");
    }
    if (md.get<std::int64_t>() != static_cast<std::int64_t>(h.d)) {
      throw SchemaError("metadata d=" + md.dump() + " disagrees with header d=" +
                        std::to_string(h.d));
    }
  }
}

}  // namespace detail

// Checks every TokenRecord invariant; throws SchemaError on the first failure.
inline void validate_records(const RecordSet& records) {
  const auto loss = records.losses();
  const auto conf = records.max_softmax();
  const auto ent = records.logit_entropy();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!(loss[i] >= 0.0f) || !std::isfinite(loss[i])) {
      throw SchemaError("token " + std::to_string(i) + ": loss must be finite and >= 0");
    }
    if (!(conf[i] > 0.0f && conf[i] <= 1.0f)) {
      throw SchemaError("token " + std::to_string(i) + ": max_softmax must be in (0, 1]");
    }
    if (!(ent[i] >= 0.0f) || !std::isfinite(ent[i])) {
      throw SchemaError("token " + std::to_string(i) +
                        ": logit_entropy must be finite and >= 0");
    }
  }
  for (float a : records.activations()) {
    if (!std::isfinite(a)) throw SchemaError("non-finite activation value");
  }
  std::unordered_set<std::uint64_t> seen;
  seen.reserve(records.size());
  const auto docs = records.doc_ids();
  const auto pos = records.positions();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::uint64_t key = (static_cast<std::uint64_t>(docs[i]) << 32) | pos[i];
    if (!seen.insert(key).second) {
      throw SchemaError("duplicate (doc_id, position) = (" + std::to_string(docs[i]) +
                        ", " + std::to_string(pos[i]) + ")");
    }
  }
}

inline std::size_t shard_size_bytes(std::size_t metadata_len, std::uint64_t n,
                                    std::uint32_t d) {
  return 4 + 2 + 4 + metadata_len + 8 + 4 + n * (kFixedColumnBytes + 4ull * d);
}

inline std::vector<unsigned char> encode_shard(const ShardHeader& header,
                                               const RecordSet& records) {
  if (records.dim() != header.d) {
    throw SchemaError("records have d=" + std::to_string(records.dim()) +
                      " but header declares d=" + std::to_string(header.d));
  }
  if (records.size() != header.n_tokens) {
    throw SchemaError("records hold " + std::to_string(records.size()) +
                      " tokens but header declares " + std::to_string(header.n_tokens));
  }
  if (header.version != kShardVersion) {
    throw FormatError("cannot write shard version " + std::to_string(header.version));
  }
  detail::check_metadata(header);
  const std::string meta = header.metadata.dump();

  detail::ByteWriter w;
  w.reserve(shard_size_bytes(meta.size(), records.size(), records.dim()));
  w.bytes(kShardMagic.data(), kShardMagic.size());
  w.uint<std::uint16_t>(header.version);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta.data(), meta.size());
  w.uint<std::uint64_t>(header.n_tokens);
  w.uint<std::uint32_t>(header.d);
  for (auto v : records.doc_ids()) w.uint<std::uint32_t>(v);
  for (auto v : records.positions()) w.uint<std::uint32_t>(v);
  for (auto v : records.token_ids()) w.uint<std::uint32_t>(v);
  for (auto v : records.losses()) w.f32(v);
  for (auto v : records.max_softmax()) w.f32(v);
  for (auto v : records.logit_entropy()) w.f32(v);
  for (auto v : records.activations()) w.f32(v);
  return w.take();
}

inline Shard decode_shard(std::span<const unsigned char> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.text(4, "magic");
  if (magic != std::string_view(kShardMagic.data(), kShardMagic.size())) {
    throw FormatError("bad shard magic");
  }
  Shard shard;
  shard.header.version = r.uint<std::uint16_t>("version");
  if (shard.header.version != kShardVersion) {
    throw FormatError("unsupported shard version " + std::to_string(shard.header.version));
  }
  const auto meta_len = r.uint<std::uint32_t>("metadata length");
  const auto meta_text = r.text(meta_len, "metadata");
  try {
    shard.header.metadata = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("shard metadata is not valid JSON: ") + e.what());
  }
  shard.header.n_tokens = r.uint<std::uint64_t>("n_tokens");
  shard.header.d = r.uint<std::uint32_t>("d");
  detail::check_metadata(shard.header);

  const std::uint64_t n = shard.header.n_tokens;
  const std::uint32_t d = shard.header.d;
  // Guard the multiplication before allocating anything.
  const long double expected = static_cast<long double>(n) * (kFixedColumnBytes + 4.0L * d);
  if (expected > static_cast<long double>(r.remaining())) {
    throw CorruptionError("shard truncated: header declares " + std::to_string(n) +
                          " tokens of d=" + std::to_string(d) + " but only " +
                          std::to_string(r.remaining()) + " payload bytes remain");
  }
  if (expected < static_cast<long double>(r.remaining())) {
    throw CorruptionError("shard has " +
                          std::to_string(r.remaining() - static_cast<std::size_t>(expected)) +
                          " trailing bytes");
  }

  std::vector<std::uint32_t> doc(n), pos(n), tok(n);
  std::vector<float> loss(n), conf(n), ent(n);
  for (auto& v : doc) v = r.uint<std::uint32_t>("doc_id");
  for (auto& v : pos) v = r.uint<std::uint32_t>("position");
  for (auto& v : tok) v = r.uint<std::uint32_t>("token_id");
  for (auto& v : loss) v = r.f32("loss");
  for (auto& v : conf) v = r.f32("max_softmax");
  for (auto& v : ent) v = r.f32("logit_entropy");

  RecordSet records(d);
  records.reserve(n);
  std::vector<float> row(d);
  for (std::uint64_t i = 0; i < n; ++i) {
    for (auto& a : row) a = r.f32("activations");
    records.push_back(doc[i], pos[i], tok[i], loss[i], conf[i], ent[i], row);
  }
  validate_records(records);
  shard.records = std::move(records);
  return shard;
}

inline Shard load_shard(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open shard " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_shard(bytes);
}

inline void write_shard(const ShardHeader& header, const RecordSet& records,
                        const std::filesystem::path& path) {
  const auto bytes = encode_shard(header, records);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_shard(const Shard& shard, const std::filesystem::path& path) {
  write_shard(shard.header, shard.records, path);
}

// Per-token L2 norm of the activation row, accumulated in double.
inline Eigen::VectorXd compute_norms(const RecordSet& records) {
  Eigen::VectorXd out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    double ss = 0.0;
    for (float a : records.row(i)) ss += static_cast<double>(a) * a;
    out[i] = std::sqrt(ss);
  }
  return out;
}

struct SplitAssignment {
  std::vector<std::uint32_t> train_ids;
  std::vector<std::uint32_t> val_ids;
  std::vector<std::uint32_t> test_ids;
  // Layer selection uses the first list; reported numbers use the second.
  std::vector<std::uint64_t> selection_seeds = {42};
  std::vector<std::uint64_t> report_seeds = {43, 44, 45, 46, 47, 48, 49};
};

// Document-level partition. Counts use largest-remainder rounding, and every
// split with a nonzero fraction receives at least one document.
inline SplitAssignment assign_splits(std::span<const std::uint32_t> doc_ids,
                                     std::array<double, 3> fractions,
                                     std::uint64_t rng_seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

  std::set<std::uint32_t> unique(doc_ids.begin(), doc_ids.end());
  std::vector<std::uint32_t> docs(unique.begin(), unique.end());
  const std::size_t n = docs.size();
  const auto nonzero = static_cast<std::size_t>(
      std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0.0; }));
  if (n < nonzero) {
    throw DataError("cannot split " + std::to_string(n) + " documents into " +
                    std::to_string(nonzero) + " non-empty splits");
  }

  std::array<std::size_t, 3> count{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double exact = fractions[s] * static_cast<double>(n);
    count[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(count[s]);
    assigned += count[s];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < 3; ++s) {
      if (rem[s] > rem[best]) best = s;
    }
    ++count[best];
    rem[best] = -1.0;
    ++assigned;
  }
  for (std::size_t s = 0; s < 3; ++s) {
    if (fractions[s] > 0.0 && count[s] == 0) {
      const auto donor = static_cast<std::size_t>(
          std::max_element(count.begin(), count.end()) - count.begin());
      --count[donor];
      ++count[s];
    }
  }

  Rng rng(rng_seed);
  rng.shuffle(std::span<std::uint32_t>(docs));
  SplitAssignment out;
  auto first = docs.begin();
  out.train_ids.assign(first, first + static_cast<std::ptrdiff_t>(count[0]));
  first += static_cast<std::ptrdiff_t>(count[0]);
  out.val_ids.assign(first, first + static_cast<std::ptrdiff_t>(count[1]));
  first += static_cast<std::ptrdiff_t>(count[1]);
  out.test_ids.assign(first, docs.end());
  std::sort(out.train_ids.begin(), out.train_ids.end());
  std::sort(out.val_ids.begin(), out.val_ids.end());
  std::sort(out.test_ids.begin(), out.test_ids.end());
  return out;
}

// Records whose doc_id is in `docs`, in original order.
inline RecordSet select_docs(const RecordSet& records, std::span<const std::uint32_t> docs) {
  std::unordered_set<std::uint32_t> keep(docs.begin(), docs.end());
  std::vector<std::size_t> idx;
  const auto ids = records.doc_ids();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep.count(ids[i]) != 0) idx.push_back(i);
  }
  return records.subset(idx);
}

struct BudgetReport {
  double ex_per_dim = 0.0;
  double threshold = 350.0;
  bool adequate = false;
  // Small models (d < 1000) showed a detection threshold between 450 and 600
  // ex/dim; budgets below 600 in that regime are flagged.
  bool in_caution_band = false;
  std::string note;
};

inline BudgetReport check_budget(std::uint64_t n_train_tokens, std::uint32_t d,
                                 double threshold = 350.0) {
  if (d == 0) throw ConfigError("hidden dimension must be positive");
  BudgetReport r;
  r.threshold = threshold;
  r.ex_per_dim = static_cast<double>(n_train_tokens) / d;
  r.adequate = r.ex_per_dim >= threshold;
  r.in_caution_band = d < 1000 && r.ex_per_dim < 600.0;
  if (!r.adequate) {
    r.note = "below the configured ex/dim threshold";
  } else if (r.in_caution_band) {
    r.note = "d < 1000 and ex/dim < 600: small models may need 450-600 ex/dim";
  } else {
    r.note = "adequate";
  }
  return r;
}

}  // namespace obsv

#endif  // OBSV_RECORD_STORE_HPP_
