#include "camh/io_util.hpp"

#include <zlib.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "camh/common.hpp"

namespace camh {

// ---------------------------------------------------------------- sha256

namespace {

struct Sha256 {
  uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                   0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  uint8_t buf[64];
  uint64_t total = 0;
  size_t fill = 0;

  static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void block(const uint8_t* p) {
    static const uint32_t k[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1,
        0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3,
        0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
        0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da,
        0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
        0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
        0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070,
        0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
        0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
        0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2};
    uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = uint32_t(p[4 * i]) << 24 | uint32_t(p[4 * i + 1]) << 16 |
             uint32_t(p[4 * i + 2]) << 8 | uint32_t(p[4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      const uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      const uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5],
             g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      const uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      const uint32_t ch = (e & f) ^ (~e & g);
      const uint32_t t1 = hh + s1 + ch + k[i] + w[i];
      const uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      const uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      const uint32_t t2 = s0 + maj;
      hh = g; g = f; f = e; e = d + t1;
      d = c; c = b; b = a; a = t1 + t2;
    }
    h[0] += a; h[1] += b; h[2] += c; h[3] += d;
    h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
  }

  void update(const uint8_t* p, size_t n) {
    total += n;
    while (n > 0) {
      const size_t take = std::min(n, 64 - fill);
      std::memcpy(buf + fill, p, take);
      fill += take;
      p += take;
      n -= take;
      if (fill == 64) {
        block(buf);
        fill = 0;
      }
    }
  }

  void final(uint8_t out[32]) {
    const uint64_t bits = total * 8;
    uint8_t pad = 0x80;
    update(&pad, 1);
    pad = 0;
    while (fill != 56) update(&pad, 1);
    uint8_t len[8];
    for (int i = 0; i < 8; ++i) len[i] = uint8_t(bits >> (56 - 8 * i));
    update(len, 8);
    for (int i = 0; i < 8; ++i) {
      out[4 * i] = uint8_t(h[i] >> 24);
      out[4 * i + 1] = uint8_t(h[i] >> 16);
      out[4 * i + 2] = uint8_t(h[i] >> 8);
      out[4 * i + 3] = uint8_t(h[i]);
    }
  }
};

}  // namespace

std::string sha256_hex(const void* data, size_t len) {
  Sha256 s;
  s.update(static_cast<const uint8_t*>(data), len);
  uint8_t digest[32];
  s.final(digest);
  static const char* hexd = "0123456789abcdef";
  std::string out(64, '0');
  for (int i = 0; i < 32; ++i) {
    out[size_t(2 * i)] = hexd[digest[i] >> 4];
    out[size_t(2 * i + 1)] = hexd[digest[i] & 0xf];
  }
  return out;
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

// ---------------------------------------------------------------- base64

static const char* kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const void* data, size_t len) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= len; i += 3) {
    const uint32_t v = uint32_t(p[i]) << 16 | uint32_t(p[i + 1]) << 8 | p[i + 2];
    out += kB64[v >> 18];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  const size_t rem = len - i;
  if (rem == 1) {
    const uint32_t v = uint32_t(p[i]) << 16;
    out += kB64[v >> 18];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rem == 2) {
    const uint32_t v = uint32_t(p[i]) << 16 | uint32_t(p[i + 1]) << 8;
    out += kB64[v >> 18];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& s) {
  static int8_t rev[256];
  static bool init = false;
  if (!init) {
    for (int i = 0; i < 256; ++i) rev[i] = -1;
    for (int i = 0; i < 64; ++i) rev[uint8_t(kB64[i])] = int8_t(i);
    init = true;
  }
  CAMH_CHECK_ARG(s.size() % 4 == 0, "base64: length not a multiple of 4");
  std::vector<uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i < s.size(); i += 4) {
    int pad = 0;
    uint32_t v = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = s[i + size_t(j)];
      if (c == '=') {
        CAMH_CHECK_ARG(i + 4 == s.size() && j >= 2, "base64: misplaced padding");
        ++pad;
        v <<= 6;
      } else {
        const int8_t d = rev[uint8_t(c)];
        CAMH_CHECK_ARG(d >= 0 && pad == 0, "base64: invalid character");
        v = v << 6 | uint32_t(d);
      }
    }
    out.push_back(uint8_t(v >> 16));
    if (pad < 2) out.push_back(uint8_t(v >> 8));
    if (pad < 1) out.push_back(uint8_t(v));
  }
  return out;
}

// ---------------------------------------------------------------- files

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed: " + path);
  return s;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open file for write: " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

void write_file_durable(const std::string& path, const std::string& bytes) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open file for write: " + path);
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size() &&
                  std::fflush(f) == 0 && ::fsync(fileno(f)) == 0;
  std::fclose(f);
  if (!ok) throw IoError("write failed: " + path);
}

void append_line_durable(const std::string& path, const std::string& line) {
  FILE* f = std::fopen(path.c_str(), "ab");
  if (!f) throw IoError("cannot open file for append: " + path);
  std::string s = line;
  s += '\n';
  const bool ok = std::fwrite(s.data(), 1, s.size(), f) == s.size() &&
                  std::fflush(f) == 0 && ::fsync(fileno(f)) == 0;
  std::fclose(f);
  if (!ok) throw IoError("append failed: " + path);
}

bool file_exists(const std::string& path) {
  std::error_code ec;
  return std::filesystem::exists(path, ec);
}

void make_dirs(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory: " + path + ": " + ec.message());
}

// ---------------------------------------------------------------- png

namespace {

void be32(std::string& s, uint32_t v) {
  s += char(v >> 24);
  s += char(v >> 16);
  s += char(v >> 8);
  s += char(v);
}

void png_chunk(std::string& out, const char type[4], const std::string& payload) {
  be32(out, uint32_t(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  const uint32_t crc = uint32_t(
      ::crc32(0L, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size())));
  be32(out, crc);
}

std::string zlib_deflate(const std::string& raw) {
  uLongf bound = compressBound(uLong(raw.size()));
  std::string out(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()),
                6) != Z_OK) {
    throw IoError("png: deflate failed");
  }
  out.resize(bound);
  return out;
}

}  // namespace

void write_png(const std::string& path, const uint8_t* pixels, int width,
               int height, int channels) {
  CAMH_CHECK_ARG(channels == 1 || channels == 3, "png: channels must be 1 or 3");
  std::string raw;
  raw.reserve(size_t(height) * (size_t(width) * size_t(channels) + 1));
  for (int y = 0; y < height; ++y) {
    raw += '\0';  // filter type: none
    raw.append(reinterpret_cast<const char*>(pixels + size_t(y) * width * channels),
               size_t(width) * size_t(channels));
  }
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  be32(ihdr, uint32_t(width));
  be32(ihdr, uint32_t(height));
  ihdr += char(8);                           // bit depth
  ihdr += char(channels == 1 ? 0 : 2);       // color type: gray / rgb
  ihdr += '\0'; ihdr += '\0'; ihdr += '\0';  // compression, filter, interlace
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", zlib_deflate(raw));
  png_chunk(out, "IEND", "");
  write_file(path, out);
}

void write_tensor_png(const std::string& path, const Tensor& chw) {
  CAMH_CHECK_ARG(chw.ndim() == 3, "write_tensor_png: expected (C,H,W)");
  const int c = int(chw.dim(0)), h = int(chw.dim(1)), w = int(chw.dim(2));
  CAMH_CHECK_ARG(c == 1 || c == 3, "write_tensor_png: C must be 1 or 3");
  double lo = chw[0], hi = chw[0];
  for (int64_t i = 0; i < chw.numel(); ++i) {
    lo = std::min(lo, double(chw[i]));
    hi = std::max(hi, double(chw[i]));
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<uint8_t> px(size_t(h) * size_t(w) * size_t(c));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const double v = (double(chw[(int64_t(ch) * h + y) * w + x]) - lo) / span;
        px[(size_t(y) * size_t(w) + size_t(x)) * size_t(c) + size_t(ch)] =
            uint8_t(std::lround(v * 255.0));
      }
    }
  }
  write_png(path, px.data(), w, h, c);
}

// ---------------------------------------------------------------- csv

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  for (size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == ',') {
      row.push_back(cell);
      cell.clear();
    } else if (c == '\n') {
      row.push_back(cell);
      cell.clear();
      rows.push_back(row);
      row.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  if (!cell.empty() || !row.empty()) {
    row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------- raw tensor

void save_raw_tensor(const std::string& path, const Tensor& t) {
  std::string out("CAMHT1\0\0", 8);
  be32(out, uint32_t(t.ndim()));
  for (size_t i = 0; i < t.ndim(); ++i) be32(out, uint32_t(t.dim(i)));
  out.append(reinterpret_cast<const char*>(t.data()), size_t(t.numel()) * 4);
  write_file(path, out);
}

Tensor load_raw_tensor(const std::string& path) {
  const std::string s = read_file(path);
  auto rd32 = [&](size_t off) {
    return uint32_t(uint8_t(s[off])) << 24 | uint32_t(uint8_t(s[off + 1])) << 16 |
           uint32_t(uint8_t(s[off + 2])) << 8 | uint32_t(uint8_t(s[off + 3]));
  };
  if (s.size() < 12 || s.compare(0, 6, "CAMHT1") != 0) {
    throw SerializationError("not a CAMHT1 tensor file: " + path);
  }
  const uint32_t nd = rd32(8);
  if (nd > 8 || s.size() < 12 + 4 * nd) throw SerializationError("corrupt tensor file: " + path);
  std::vector<int64_t> shape;
  int64_t n = 1;
  for (uint32_t i = 0; i < nd; ++i) {
    shape.push_back(int64_t(rd32(12 + 4 * i)));
    n *= shape.back();
  }
  const size_t off = 12 + 4 * nd;
  if (s.size() != off + size_t(n) * 4) throw SerializationError("truncated tensor file: " + path);
  Tensor t(shape);
  std::memcpy(t.data(), s.data() + off, size_t(n) * 4);
  return t;
}

}  // namespace camh
