#pragma once

// Header-framed weight archives (the community safetensors layout) and
// pre-tokenized calibration batches.
//
// Archive layout:
//   u64 little-endian header length H
//   H bytes of UTF-8 JSON: name -> {"dtype", "shape", "data_offsets": [begin, end]}
//   tensor data, offsets relative to the first byte after the header
//
// An opened archive holds only the index. Each load reads one tensor's byte
// range through its own file handle, so concurrent loads are fine.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rom/matrix.hpp"

namespace rom {

enum class DType { kF32, kF16, kBF16 };

std::string_view dtype_name(DType dtype);  // "F32" | "F16" | "BF16"
DType parse_dtype(std::string_view name);
std::size_t dtype_width(DType dtype);

struct TensorInfo {
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin = 0;  // relative to the data block
  std::uint64_t end = 0;

  std::uint64_t element_count() const;
  std::uint64_t byte_length() const { return end - begin; }

  friend bool operator==(const TensorInfo&, const TensorInfo&) = default;
};

class TensorArchive {
 public:
  static TensorArchive open(const std::filesystem::path& path);

  const std::map<std::string, TensorInfo>& entries() const noexcept { return entries_; }
  bool contains(const std::string& name) const { return entries_.contains(name); }
  const TensorInfo& info(const std::string& name) const;
  const std::filesystem::path& path() const noexcept { return path_; }
  std::uint64_t data_offset() const noexcept { return data_offset_; }

  // Widened to f32. 1-D tensors come back as 1 x n.
  Matrix load_matrix(const std::string& name) const;

  // Total tensor bytes read by load_matrix since open.
  std::uint64_t bytes_read() const noexcept { return stats_->bytes_read.load(); }

 private:
  struct Stats {
    std::atomic<std::uint64_t> bytes_read{0};
  };

  std::filesystem::path path_;
  std::uint64_t data_offset_ = 0;
  std::map<std::string, TensorInfo> entries_;
  std::shared_ptr<Stats> stats_ = std::make_shared<Stats>();
};

inline TensorArchive open_archive(const std::filesystem::path& path) { return TensorArchive::open(path); }

inline Matrix load_matrix(const TensorArchive& archive, const std::string& name) {
  return archive.load_matrix(name);
}

// A tensor queued for writing. `shape` may be 1-D or 2-D and must cover
// exactly values.size() elements; values are narrowed to dtype on write.
struct TensorData {
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> shape;
  Matrix values;

  static TensorData from_matrix(Matrix m, DType dtype = DType::kF32);
  static TensorData vector(std::vector<float> v, DType dtype = DType::kF32);
};

using TensorMap = std::map<std::string, TensorData>;

// Deterministic: names sorted, data packed in name order, header padded with
// spaces to an 8-byte boundary.
void write_archive(const std::filesystem::path& path, const TensorMap& tensors);

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t vocab_size = 0;
  std::vector<std::uint32_t> ids;  // batch * seq_len, row-major by sequence

  std::uint32_t at(std::size_t b, std::size_t s) const { return ids[b * seq_len + s]; }
  std::size_t token_count() const { return batch * seq_len; }

  // First `batch` sequences truncated to `seq_len` positions.
  TokenBatch slice(std::size_t batch, std::size_t seq_len) const;

  // FNV-1a over the ids, for describing a calibration set without storing it.
  std::uint64_t fingerprint() const;
};

// Token batch files are JSON lines: {"batch": B, "seq_len": S, "vocab_size": V}
// followed by exactly B arrays of S ids. When model_vocab is given the ids are
// also checked against it.
TokenBatch load_token_batch(const std::filesystem::path& path, std::optional<std::size_t> model_vocab = std::nullopt);
void write_token_batch(const std::filesystem::path& path, const TokenBatch& tokens);

}  // namespace rom
