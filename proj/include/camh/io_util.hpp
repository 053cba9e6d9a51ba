#ifndef CAMH_IO_UTIL_HPP_
#define CAMH_IO_UTIL_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "camh/tensor.hpp"

namespace camh {

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

std::string base64_encode(const void* data, size_t len);
std::vector<uint8_t> base64_decode(const std::string& s);  // throws ArgumentError

std::string read_file(const std::string& path);                       // throws IoError
void write_file(const std::string& path, const std::string& bytes);   // throws IoError
void write_file_durable(const std::string& path, const std::string& bytes);
void append_line_durable(const std::string& path, const std::string& line);
bool file_exists(const std::string& path);
void make_dirs(const std::string& path);

// Minimal PNG writer (zlib deflate, 8-bit, channels = 1 or 3).
void write_png(const std::string& path, const uint8_t* pixels, int width,
               int height, int channels);

// Min-max normalized grayscale/rgb visualization of a (C,H,W) tensor.
void write_tensor_png(const std::string& path, const Tensor& chw);

// 6-decimal fixed formatting used in every emitted CSV.
std::string fmt_real(double v);

std::vector<std::vector<std::string>> parse_csv(const std::string& text);

// Raw tensor container (".camht"): magic, dims, f32le payload. Used by the
// CLI client for image inputs and by tests.
void save_raw_tensor(const std::string& path, const Tensor& t);
Tensor load_raw_tensor(const std::string& path);

}  // namespace camh

#endif
