#pragma once

// File formats.
//
// Raw images: the payload file holds elements in row-major, interleaved
// channel order (y, x, c), little-endian, no header. A text sidecar at
// "<payload>.hdr" describes it:
//
//   GSRAW 1
//   channels 3
//   height 16000
//   width 64000
//   kind u8            (u8 | f32)
//   order little
//
// Portable images: binary PGM (P5) and PPM (P6), maxval 255.
//
// Checkpoints (.gsck), all integers little-endian:
//   "GSCK" u32 version=1
//   u64 arch_text_bytes, arch text (to_text format)
//   u64 step, f64 val_loss, u64 seed
//   per layer: u64 n, n x f32 weights; u8 has_bias [u64 n, n x f32 bias]
//   u8 has_adam [u64 adam_step, m payloads, v payloads (same layout)]
// Payload counts must match what the embedded arch implies.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gigaseg/arch.hpp"
#include "gigaseg/error.hpp"
#include "gigaseg/image.hpp"
#include "gigaseg/model.hpp"
#include "gigaseg/optim.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace fs = std::filesystem;

// ---- raw sidecar format ------------------------------------------------------

enum class ElemKind { U8, F32 };

inline std::size_t elem_size(ElemKind k) { return k == ElemKind::U8 ? 1 : 4; }
inline const char* elem_name(ElemKind k) { return k == ElemKind::U8 ? "u8" : "f32"; }

struct RawHeader {
  std::size_t channels = 1, height = 0, width = 0;
  ElemKind kind = ElemKind::U8;

  std::size_t row_bytes() const { return width * channels * elem_size(kind); }
  std::size_t payload_bytes() const { return row_bytes() * height; }
  friend bool operator==(const RawHeader&, const RawHeader&) = default;
};

inline std::string header_path(const fs::path& payload) { return payload.string() + ".hdr"; }

inline void write_raw_header(const fs::path& payload, const RawHeader& h) {
  std::ofstream out(header_path(payload));
  if (!out) throw IoError("cannot write " + header_path(payload));
  out << "GSRAW 1\nchannels " << h.channels << "\nheight " << h.height << "\nwidth " << h.width << "\nkind "
      << elem_name(h.kind) << "\norder little\n";
  if (!out) throw IoError("write failed: " + header_path(payload));
}

inline RawHeader read_raw_header(const fs::path& payload) {
  const std::string hp = header_path(payload);
  std::ifstream in(hp);
  if (!in) throw IoError("cannot open raw header " + hp);
  std::string line;
  if (!std::getline(in, line) || line.rfind("GSRAW ", 0) != 0) throw FormatError(hp + ": missing GSRAW magic");
  if (line != "GSRAW 1") throw FormatError(hp + ": unsupported version '" + line.substr(6) + "'");
  RawHeader h;
  bool seen[5] = {};
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key, val;
    is >> key >> val;
    auto number = [&](std::size_t& dst) {
      try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(val, &pos);
        if (pos != val.size() || v == 0) throw std::invalid_argument(val);
        dst = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        throw FormatError(hp + ":" + std::to_string(lineno) + ": bad " + key + " '" + val + "'");
      }
    };
    if (key == "channels") number(h.channels), seen[0] = true;
    else if (key == "height") number(h.height), seen[1] = true;
    else if (key == "width") number(h.width), seen[2] = true;
    else if (key == "kind") {
      if (val == "u8") h.kind = ElemKind::U8;
      else if (val == "f32") h.kind = ElemKind::F32;
      else throw FormatError(hp + ":" + std::to_string(lineno) + ": unknown kind '" + val + "'");
      seen[3] = true;
    } else if (key == "order") {
      if (val != "little") throw FormatError(hp + ":" + std::to_string(lineno) + ": unsupported order '" + val + "'");
      seen[4] = true;
    } else {
      throw FormatError(hp + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  for (bool s : seen)
    if (!s) throw FormatError(hp + ": incomplete header");
  constexpr auto kMax = std::numeric_limits<std::size_t>::max();
  if (h.width > kMax / h.channels / 4 || h.height > kMax / (h.width * h.channels * 4))
    throw FormatError(hp + ": dimensions overflow");
  return h;
}

// Random-access row reader over a raw payload.
class RawReader {
 public:
  explicit RawReader(const fs::path& path) : path_(path), header_(read_raw_header(path)) {
    in_.open(path, std::ios::binary);
    if (!in_) throw IoError("cannot open " + path.string());
    std::error_code ec;
    const auto actual = fs::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path.string());
    if (actual != header_.payload_bytes())
      throw FormatError(path.string() + ": payload is " + std::to_string(actual) + " bytes, header implies " +
                        std::to_string(header_.payload_bytes()));
  }

  const RawHeader& header() const { return header_; }

  void read_bytes(std::size_t y0, std::size_t n, void* dst) {
    if (y0 + n > header_.height)
      throw IoError(path_.string() + ": rows [" + std::to_string(y0) + ", " + std::to_string(y0 + n) +
                    ") past height " + std::to_string(header_.height));
    in_.seekg(static_cast<std::streamoff>(y0 * header_.row_bytes()));
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n * header_.row_bytes()));
    if (!in_) throw IoError(path_.string() + ": short read at row " + std::to_string(y0));
  }

  Image8 read_rows(std::size_t y0, std::size_t n) {
    if (header_.kind != ElemKind::U8) throw FormatError(path_.string() + " holds f32 elements, not u8");
    Image8 img(header_.channels, n, header_.width);
    read_bytes(y0, n, img.data.data());
    return img;
  }

  // Rows of an f32 payload, channel-interleaved.
  std::vector<float> read_rows_f32(std::size_t y0, std::size_t n) {
    if (header_.kind != ElemKind::F32) throw FormatError(path_.string() + " holds u8 elements, not f32");
    std::vector<float> v(n * header_.width * header_.channels);
    read_bytes(y0, n, v.data());
    return v;
  }

 private:
  fs::path path_;
  RawHeader header_;
  std::ifstream in_;
};

// Sequential row writer; the header is written on construction.
class RawWriter {
 public:
  RawWriter(const fs::path& path, const RawHeader& h) : path_(path), header_(h) {
    write_raw_header(path, h);
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path.string());
  }
  void write_rows(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n * header_.row_bytes()));
    if (!out_) throw IoError("write failed: " + path_.string());
    rows_ += n;
  }
  void close() {
    out_.close();
    if (rows_ != header_.height)
      throw IoError(path_.string() + ": wrote " + std::to_string(rows_) + " rows, header says " +
                    std::to_string(header_.height));
  }

 private:
  fs::path path_;
  RawHeader header_;
  std::ofstream out_;
  std::size_t rows_ = 0;
};

inline void write_raw(const fs::path& path, const Image8& img) {
  RawWriter w(path, RawHeader{img.channels, img.height, img.width, ElemKind::U8});
  w.write_rows(img.data.data(), img.height);
  w.close();
}

inline Image8 read_raw(const fs::path& path) {
  RawReader r(path);
  return r.read_rows(0, r.header().height);
}

// 1xCxHxW tensors; planes are interleaved on disk like images.
inline void write_raw_tensor(const fs::path& path, const Tensor<float>& t) {
  const Shape s = t.shape();
  if (s.n != 1) throw ShapeError("raw tensors must have batch 1, got " + s.str());
  RawWriter w(path, RawHeader{s.c, s.h, s.w, ElemKind::F32});
  std::vector<float> row(s.w * s.c);
  for (std::size_t y = 0; y < s.h; ++y) {
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c) row[x * s.c + c] = t.at(0, c, y, x);
    w.write_rows(row.data(), 1);
  }
  w.close();
}

inline Tensor<float> read_raw_tensor(const fs::path& path) {
  RawReader r(path);
  const RawHeader& h = r.header();
  Tensor<float> t(Shape{1, h.channels, h.height, h.width});
  for (std::size_t y = 0; y < h.height; ++y) {
    const auto row = r.read_rows_f32(y, 1);
    for (std::size_t x = 0; x < h.width; ++x)
      for (std::size_t c = 0; c < h.channels; ++c) t.at(0, c, y, x) = row[x * h.channels + c];
  }
  return t;
}

// ---- PGM / PPM ---------------------------------------------------------------

inline void write_pnm(const fs::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ShapeError("PNM needs 1 or 3 channels, got " + std::to_string(img.channels));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline Image8 read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t += ch;
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError(path.string() + ": not a binary PGM/PPM (magic '" + magic + "')");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": bad PNM header");
  }
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported, got " + std::to_string(maxval));
  if (w == 0 || h == 0) throw FormatError(path.string() + ": zero dimension");
  Image8 img(magic == "P5" ? 1 : 3, h, w);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.data.size())
    throw FormatError(path.string() + ": pixel data is " + std::to_string(in.gcount()) + " bytes, expected " +
                      std::to_string(img.data.size()));
  return img;
}

inline bool is_raw_path(const fs::path& p) { return p.extension() == ".gsraw" || p.extension() == ".raw"; }

inline Image8 read_image(const fs::path& path) { return is_raw_path(path) ? read_raw(path) : read_pnm(path); }
inline void write_image(const fs::path& path, const Image8& img) {
  if (is_raw_path(path)) write_raw(path, img);
  else write_pnm(path, img);
}

// Masks are stored as 0/255 so they are viewable; reading maps non-zero to 1.
inline void write_mask(const fs::path& path, const Image8& mask01) {
  Image8 v = mask01;
  for (auto& p : v.data) p = p ? 255 : 0;
  write_image(path, v);
}
inline Image8 read_mask(const fs::path& path) {
  Image8 m = read_image(path);
  if (m.channels != 1) throw FormatError(path.string() + ": mask must be single-channel, got " + m.dims());
  for (auto& p : m.data) p = p ? 1 : 0;
  return m;
}

// ---- checkpoints ----------------------------------------------------------------

struct Checkpoint {
  ModelParams<float> params;
  std::optional<AdamState<float>> adam;
  std::uint64_t step = 0;
  double val_loss = 0.0;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& out) : out_(out) {}
  template <typename V>
  void put(V v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& out_;
};

class BinReader {
 public:
  BinReader(std::istream& in, std::string name) : in_(in), name_(std::move(name)) {}
  template <typename V>
  V get(const char* what) {
    V v{};
    bytes(&v, sizeof(V), what);
    return v;
  }
  void bytes(void* p, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(name_ + ": truncated while reading " + what);
  }
  const std::string& name() const { return name_; }

 private:
  std::istream& in_;
  std::string name_;
};

inline void put_params(BinWriter& w, const ModelParams<float>& p) {
  for (const auto& l : p.layers) {
    w.put<std::uint64_t>(l.weights.size());
    w.bytes(l.weights.data(), l.weights.bytes());
    w.put<std::uint8_t>(l.bias ? 1 : 0);
    if (l.bias) {
      w.put<std::uint64_t>(l.bias->size());
      w.bytes(l.bias->data(), l.bias->bytes());
    }
  }
}

inline void get_params(BinReader& r, ModelParams<float>& p) {
  for (std::size_t i = 0; i < p.arch.layers.size(); ++i) {
    const ConvSpec& c = p.arch.layers[i].conv;
    auto& l = p.layers[i];
    const auto n = r.get<std::uint64_t>("weight count");
    if (n != c.weight_count())
      throw FormatError(r.name() + ": layer " + std::to_string(i) + " stores " + std::to_string(n) +
                        " weights, arch implies " + std::to_string(c.weight_count()));
    r.bytes(l.weights.data(), l.weights.bytes(), "weights");
    const bool has_bias = r.get<std::uint8_t>("bias flag") != 0;
    if (has_bias != c.has_bias) throw FormatError(r.name() + ": layer " + std::to_string(i) + " bias flag mismatch");
    if (has_bias) {
      const auto nb = r.get<std::uint64_t>("bias count");
      if (nb != c.out_channels)
        throw FormatError(r.name() + ": layer " + std::to_string(i) + " stores " + std::to_string(nb) +
                          " biases, arch implies " + std::to_string(c.out_channels));
      r.bytes(l.bias->data(), l.bias->bytes(), "bias");
    }
  }
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes to a temporary name and renames, so a crash never leaves a torn file.
inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    detail::BinWriter w(out);
    w.bytes("GSCK", 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const std::string arch = to_text(ck.params.arch);
    w.put<std::uint64_t>(arch.size());
    w.bytes(arch.data(), arch.size());
    w.put<std::uint64_t>(ck.step);
    w.put<double>(ck.val_loss);
    w.put<std::uint64_t>(ck.params.seed);
    detail::put_params(w, ck.params);
    w.put<std::uint8_t>(ck.adam ? 1 : 0);
    if (ck.adam) {
      w.put<std::uint64_t>(ck.adam->step);
      detail::put_params(w, ck.adam->m);
      detail::put_params(w, ck.adam->v);
    }
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  detail::BinReader r(in, path.string());
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "GSCK", 4) != 0) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto alen = r.get<std::uint64_t>("arch length");
  if (alen > (1u << 20)) throw FormatError(path.string() + ": implausible arch text length");
  std::string arch(alen, '\0');
  r.bytes(arch.data(), alen, "arch text");
  Checkpoint ck;
  ck.step = r.get<std::uint64_t>("step");
  ck.val_loss = r.get<double>("val loss");
  const auto seed = r.get<std::uint64_t>("seed");
  ck.params = zeros_like(init_params<float>(arch_from_text(arch), 0));
  ck.params.seed = seed;
  detail::get_params(r, ck.params);
  if (r.get<std::uint8_t>("adam flag")) {
    AdamState<float> st = adam_init(ck.params);
    st.step = r.get<std::uint64_t>("adam step");
    detail::get_params(r, st.m);
    detail::get_params(r, st.v);
    ck.adam = std::move(st);
  }
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0) throw FormatError(path.string() + ": trailing bytes after payload");
  return ck;
}

// Bytes a checkpoint of this arch occupies, from the layout above.
inline std::size_t checkpoint_size(const ArchSpec& arch, bool with_adam) {
  std::size_t payload = 0;
  for (const auto& l : arch.layers) {
    payload += 8 + 4 * l.conv.weight_count() + 1;
    if (l.conv.has_bias) payload += 8 + 4 * l.conv.out_channels;
  }
  const std::size_t head = 4 + 4 + 8 + to_text(arch).size() + 8 + 8 + 8;
  return head + payload + 1 + (with_adam ? 8 + 2 * payload : 0);
}

// ---- line-delimited JSON log ---------------------------------------------------

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path.string());
  }
  void write(const nlohmann::json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

inline std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace gigaseg
