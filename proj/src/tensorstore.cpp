#include "rom/tensorstore.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rom/kernels.hpp"

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace rom {

using nlohmann::json;

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "F32";
    case DType::kF16: return "F16";
    case DType::kBF16: return "BF16";
  }
  return "?";
}

DType parse_dtype(std::string_view name) {
  if (name == "F32") return DType::kF32;
  if (name == "F16") return DType::kF16;
  if (name == "BF16") return DType::kBF16;
  fail(ErrorKind::kFormat, "unsupported dtype '" + std::string(name) + "'");
}

std::size_t dtype_width(DType dtype) { return dtype == DType::kF32 ? 4 : 2; }

std::uint64_t TensorInfo::element_count() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : shape) n *= d;
  return n;
}

namespace {

std::uint64_t file_size_of(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) fail(ErrorKind::kIo, "cannot stat " + path.string() + ": " + ec.message());
  return size;
}

TensorInfo parse_entry(const std::string& name, const json& entry) {
  if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets"))
    fail(ErrorKind::kFormat, "tensor '" + name + "' needs dtype, shape and data_offsets");
  const json& dtype = entry.at("dtype");
  const json& shape = entry.at("shape");
  const json& offsets = entry.at("data_offsets");
  if (!dtype.is_string()) fail(ErrorKind::kFormat, "tensor '" + name + "': dtype must be a string");
  if (!shape.is_array()) fail(ErrorKind::kFormat, "tensor '" + name + "': shape must be an array");
  if (!offsets.is_array() || offsets.size() != 2)
    fail(ErrorKind::kFormat, "tensor '" + name + "': data_offsets must be [begin, end]");

  TensorInfo info;
  info.dtype = parse_dtype(dtype.get<std::string>());
  for (const json& d : shape) {
    if (!d.is_number_unsigned() && !(d.is_number_integer() && d.get<std::int64_t>() >= 0))
      fail(ErrorKind::kFormat, "tensor '" + name + "': shape entries must be non-negative integers");
    info.shape.push_back(d.get<std::uint64_t>());
  }
  for (const json& o : offsets) {
    if (!o.is_number_unsigned() && !(o.is_number_integer() && o.get<std::int64_t>() >= 0))
      fail(ErrorKind::kFormat, "tensor '" + name + "': offsets must be non-negative integers");
  }
  info.begin = offsets[0].get<std::uint64_t>();
  info.end = offsets[1].get<std::uint64_t>();
  return info;
}

}  // namespace

TensorArchive TensorArchive::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open archive " + path.string());
  const std::uint64_t total = file_size_of(path);
  if (total < 8) fail(ErrorKind::kFormat, path.string() + ": shorter than the 8-byte header length");

  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
  if (header_len > total - 8)
    fail(ErrorKind::kFormat, path.string() + ": header length " + std::to_string(header_len) + " exceeds file");

  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) fail(ErrorKind::kIo, path.string() + ": short read on header");

  json parsed;
  try {
    parsed = json::parse(header);
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, path.string() + ": header is not valid JSON (" + e.what() + ")");
  }
  if (!parsed.is_object()) fail(ErrorKind::kFormat, path.string() + ": header must be a JSON object");

  TensorArchive archive;
  archive.path_ = path;
  archive.data_offset_ = 8 + header_len;
  const std::uint64_t data_size = total - archive.data_offset_;

  for (const auto& [name, entry] : parsed.items()) {
    if (name == "__metadata__") continue;
    archive.entries_.emplace(name, parse_entry(name, entry));
  }

  std::vector<std::pair<std::uint64_t, const std::string*>> ranges;
  for (const auto& [name, info] : archive.entries_) {
    if (info.begin > info.end || info.end > data_size)
      fail(ErrorKind::kIntegrity, "tensor '" + name + "' byte range [" + std::to_string(info.begin) + ", " +
                                      std::to_string(info.end) + ") outside data block of " +
                                      std::to_string(data_size) + " bytes");
    if (info.byte_length() != info.element_count() * dtype_width(info.dtype))
      fail(ErrorKind::kIntegrity, "tensor '" + name + "' byte length does not match shape and dtype");
    ranges.emplace_back(info.begin, &name);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    const TensorInfo& prev = archive.entries_.at(*ranges[i - 1].second);
    if (prev.end > ranges[i].first)
      fail(ErrorKind::kIntegrity,
           "tensors '" + *ranges[i - 1].second + "' and '" + *ranges[i].second + "' overlap");
  }
  return archive;
}

const TensorInfo& TensorArchive::info(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(ErrorKind::kLookup, "no tensor named '" + name + "' in " + path_.string());
  return it->second;
}

Matrix TensorArchive::load_matrix(const std::string& name) const {
  const TensorInfo& meta = info(name);
  if (meta.shape.size() > 2)
    fail(ErrorKind::kUnsupportedShape,
         "tensor '" + name + "' has " + std::to_string(meta.shape.size()) + " dimensions; only 1-D and 2-D load");
  const std::size_t rows = meta.shape.size() == 2 ? meta.shape[0] : 1;
  const std::size_t cols = meta.shape.empty() ? 1 : meta.shape.back();
  const std::size_t count = rows * cols;

  std::ifstream in(path_, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot reopen archive " + path_.string());
  in.seekg(static_cast<std::streamoff>(data_offset_ + meta.begin));
  std::vector<char> raw(meta.byte_length());
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) fail(ErrorKind::kIo, "short read on tensor '" + name + "'");
  stats_->bytes_read.fetch_add(raw.size());

  std::vector<float> values(count);
  if (meta.dtype == DType::kF32) {
    std::memcpy(values.data(), raw.data(), raw.size());
  } else {
    std::vector<std::uint16_t> half(count);
    std::memcpy(half.data(), raw.data(), raw.size());
    const auto& k = kernels::active();
    (meta.dtype == DType::kF16 ? k.half_to_float : k.bf16_to_float)(half.data(), values.data(), count);
  }
  for (float v : values)
    if (!std::isfinite(v)) fail(ErrorKind::kNumerical, "tensor '" + name + "' contains non-finite values");
  return Matrix(rows, cols, std::move(values));
}

TensorData TensorData::from_matrix(Matrix m, DType dtype) {
  TensorData t;
  t.dtype = dtype;
  t.shape = {m.rows(), m.cols()};
  t.values = std::move(m);
  return t;
}

TensorData TensorData::vector(std::vector<float> v, DType dtype) {
  TensorData t;
  t.dtype = dtype;
  t.shape = {v.size()};
  const std::size_t n = v.size();
  t.values = Matrix(1, n, std::move(v));
  return t;
}

void write_archive(const std::filesystem::path& path, const TensorMap& tensors) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    require(!name.empty() && name != "__metadata__", ErrorKind::kArgument, "invalid tensor name '" + name + "'");
    require(t.shape.size() <= 2, ErrorKind::kUnsupportedShape, "tensor '" + name + "' has more than 2 dimensions");
    std::uint64_t count = 1;
    for (auto d : t.shape) count *= d;
    require(count == t.values.size(), ErrorKind::kDimension,
            "tensor '" + name + "' shape does not match its " + std::to_string(t.values.size()) + " values");
    const std::uint64_t bytes = count * dtype_width(t.dtype);
    header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write archive " + path.string());
  const std::uint64_t len = text.size();
  unsigned char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>(len >> (8 * i));
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  const auto& k = kernels::active();
  for (const auto& [name, t] : tensors) {
    const auto values = t.values.values();
    if (t.dtype == DType::kF32) {
      out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
      continue;
    }
    std::vector<std::uint16_t> narrow(values.size());
    if (t.dtype == DType::kF16) {
      k.float_to_half(values.data(), narrow.data(), values.size());
      for (std::uint16_t h : narrow)
        if ((h & 0x7c00u) == 0x7c00u) fail(ErrorKind::kRange, "tensor '" + name + "' overflows F16");
    } else {
      std::transform(values.begin(), values.end(), narrow.begin(), kernels::float_to_bf16_bits);
    }
    out.write(reinterpret_cast<const char*>(narrow.data()), static_cast<std::streamsize>(narrow.size() * 2));
  }
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

TokenBatch TokenBatch::slice(std::size_t new_batch, std::size_t new_seq) const {
  require(new_batch >= 1 && new_batch <= batch && new_seq >= 1 && new_seq <= seq_len, ErrorKind::kArgument,
          "cannot slice a " + std::to_string(batch) + "x" + std::to_string(seq_len) + " batch to " +
              std::to_string(new_batch) + "x" + std::to_string(new_seq));
  TokenBatch out{new_batch, new_seq, vocab_size, {}};
  out.ids.reserve(new_batch * new_seq);
  for (std::size_t b = 0; b < new_batch; ++b)
    for (std::size_t s = 0; s < new_seq; ++s) out.ids.push_back(at(b, s));
  return out;
}

std::uint64_t TokenBatch::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  mix(batch);
  mix(seq_len);
  for (std::uint32_t id : ids) mix(id);
  return h;
}

TokenBatch load_token_batch(const std::filesystem::path& path, std::optional<std::size_t> model_vocab) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open token batch " + path.string());

  auto parse_line = [&path](const std::string& line, std::size_t line_no) {
    try {
      return json::parse(line);
    } catch (const json::exception&) {
      fail(ErrorKind::kFormat, path.string() + ":" + std::to_string(line_no) + ": not valid JSON");
    }
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line) && line.find_first_not_of(" \t\r") == std::string::npos) ++line_no;
  ++line_no;
  if (line.empty()) fail(ErrorKind::kFormat, path.string() + ": missing header line");
  const json head = parse_line(line, line_no);
  for (const char* key : {"batch", "seq_len", "vocab_size"}) {
    if (!head.is_object() || !head.contains(key) || !head.at(key).is_number_unsigned())
      fail(ErrorKind::kFormat, path.string() + ": header needs unsigned integer '" + key + "'");
  }
  TokenBatch tokens;
  tokens.batch = head.at("batch").get<std::size_t>();
  tokens.seq_len = head.at("seq_len").get<std::size_t>();
  tokens.vocab_size = head.at("vocab_size").get<std::size_t>();
  if (tokens.batch == 0 || tokens.seq_len == 0 || tokens.vocab_size == 0)
    fail(ErrorKind::kFormat, path.string() + ": batch, seq_len and vocab_size must be positive");
  const std::size_t limit = model_vocab ? std::min(*model_vocab, tokens.vocab_size) : tokens.vocab_size;
  tokens.ids.reserve(tokens.batch * tokens.seq_len);

  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (rows == tokens.batch)
      fail(ErrorKind::kFormat, path.string() + ": more than the declared " + std::to_string(tokens.batch) + " rows");
    const json row = parse_line(line, line_no);
    if (!row.is_array() || row.size() != tokens.seq_len)
      fail(ErrorKind::kFormat, path.string() + ":" + std::to_string(line_no) + ": expected an array of " +
                                   std::to_string(tokens.seq_len) + " ids");
    for (const json& id : row) {
      if (!id.is_number_integer()) fail(ErrorKind::kFormat, path.string() + ":" + std::to_string(line_no) + ": non-integer id");
      const std::int64_t v = id.get<std::int64_t>();
      if (v < 0 || static_cast<std::uint64_t>(v) >= limit)
        fail(ErrorKind::kRange, path.string() + ":" + std::to_string(line_no) + ": id " + std::to_string(v) +
                                    " outside vocabulary of " + std::to_string(limit));
      tokens.ids.push_back(static_cast<std::uint32_t>(v));
    }
    ++rows;
  }
  if (rows != tokens.batch)
    fail(ErrorKind::kFormat, path.string() + ": declared " + std::to_string(tokens.batch) + " rows, found " +
                                 std::to_string(rows));
  return tokens;
}

void write_token_batch(const std::filesystem::path& path, const TokenBatch& tokens) {
  require(tokens.ids.size() == tokens.batch * tokens.seq_len, ErrorKind::kDimension, "token batch size mismatch");
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write token batch " + path.string());
  out << json{{"batch", tokens.batch}, {"seq_len", tokens.seq_len}, {"vocab_size", tokens.vocab_size}}.dump() << '\n';
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    out << '[';
    for (std::size_t s = 0; s < tokens.seq_len; ++s) out << (s ? "," : "") << tokens.at(b, s);
    out << "]\n";
  }
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace rom
