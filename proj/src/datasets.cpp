#include "camh/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>

#include "camh/io_util.hpp"
#include "camh/parallel.hpp"
#include "camh/rng.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace camh {

// ---------------------------------------------------------------- roots & catalog

std::string resolve_data_root(const std::string& cli_value) {
  if (!cli_value.empty()) return cli_value;
  if (const char* env = std::getenv("CAMH_DATA_ROOT")) {
    if (*env) return env;
  }
  return "./data";
}

DatasetHandle dataset_handle(const std::string& source) {
  DatasetHandle h;
  h.source = source;
  h.source_uri = source;
  if (source == "mnist") {
    h.spec = {"mnist", 10, {1, 28, 28}, 60000, 10000};
    h.native_shape = {1, 28, 28};
  } else if (source == "svhn") {
    h.spec = {"svhn", 10, {3, 32, 32}, 73257, 26032};
    h.native_shape = {3, 32, 32};
  } else if (source == "gtsrb") {
    h.spec = {"gtsrb", 43, {3, 32, 32}, 39209, 12630};
    h.native_shape = {3, 32, 32};
  } else if (source == "cifar10") {
    h.spec = {"cifar10", 10, {3, 32, 32}, 50000, 10000};
    h.native_shape = {3, 32, 32};
  } else if (source == "cifar100") {
    h.spec = {"cifar100", 100, {3, 32, 32}, 50000, 10000};
    h.native_shape = {3, 32, 32};
  } else {
    throw ArgumentError("unknown dataset source: " + source);
  }
  h.native_train_count = h.spec.train_count;
  h.native_test_count = h.spec.test_count;
  return h;
}

DatasetHandle synthetic_handle(const std::string& name, int num_classes, Shape3 shape,
                               int64_t train_count, int64_t test_count, uint64_t seed) {
  DatasetHandle h;
  h.source = "synthetic";
  h.source_uri = "";
  h.seed = seed;
  h.spec = {name, num_classes, shape, train_count, test_count};
  h.native_shape = shape;
  h.native_train_count = train_count;
  h.native_test_count = test_count;
  h.validate();
  return h;
}

DatasetHandle derive_cifarm(uint64_t seed, int m, const std::string& cache_dir) {
  CAMH_CHECK_ARG(m >= 1 && m <= 100, "derive_cifarm: m must be in [1, 100]");
  Rng rng = Rng(seed).fork("cifarm", uint64_t(m));
  std::vector<int> classes = rng.sample_without_replacement(100, m);
  std::sort(classes.begin(), classes.end());

  DatasetHandle h;
  h.source = "cifarm";
  h.source_uri = "cifar100";
  h.class_keep = classes;
  // Train pool is the full 600-per-class corpus; the test split reuses the
  // standard CIFAR100 test subset of the kept classes (contained in the pool).
  h.spec = {"cifarm" + std::to_string(m), m, {3, 32, 32}, int64_t(m) * 600, int64_t(m) * 100};
  h.native_shape = {3, 32, 32};
  h.native_train_count = h.spec.train_count;
  h.native_test_count = h.spec.test_count;

  if (!cache_dir.empty()) {
    make_dirs(cache_dir);
    const std::string path =
        cache_dir + "/" + std::to_string(seed) + "_" + std::to_string(m) + ".json";
    const json arr = classes;
    const std::string text = arr.dump();
    if (file_exists(path)) {
      if (read_file(path) != text) {
        throw DataIntegrityError("cifarm cache mismatch at " + path);
      }
    } else {
      write_file(path, text);
    }
  }
  return h;
}

// ---------------------------------------------------------------- shape adaptation

namespace {

void resize_bilinear_chw(const float* src, int c, int ih, int iw, float* dst, int oh, int ow) {
  if (ih == oh && iw == ow) {
    std::memcpy(dst, src, size_t(c) * ih * iw * 4);
    return;
  }
  const double sy = double(ih) / oh;
  const double sx = double(iw) / ow;
  for (int ch = 0; ch < c; ++ch) {
    const float* in = src + size_t(ch) * ih * iw;
    float* out = dst + size_t(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), double(ih - 1));
      const int y0 = int(fy);
      const int y1 = std::min(y0 + 1, ih - 1);
      const double wy = fy - y0;
      for (int ox = 0; ox < ow; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        fx = std::min(std::max(fx, 0.0), double(iw - 1));
        const int x0 = int(fx);
        const int x1 = std::min(x0 + 1, iw - 1);
        const double wx = fx - x0;
        const double top = (1.0 - wx) * in[y0 * iw + x0] + wx * in[y0 * iw + x1];
        const double bot = (1.0 - wx) * in[y1 * iw + x0] + wx * in[y1 * iw + x1];
        out[oy * ow + ox] = float((1.0 - wy) * top + wy * bot);
      }
    }
  }
}

// 1->3 replicate, 3->1 rec601 luma. src has `ic` channels of h*w.
void convert_channels(const float* src, int ic, int hw, float* dst, int oc) {
  if (ic == oc) {
    std::memcpy(dst, src, size_t(ic) * hw * 4);
  } else if (ic == 1 && oc == 3) {
    for (int ch = 0; ch < 3; ++ch) std::memcpy(dst + size_t(ch) * hw, src, size_t(hw) * 4);
  } else if (ic == 3 && oc == 1) {
    for (int i = 0; i < hw; ++i) {
      dst[i] = 0.299f * src[i] + 0.587f * src[hw + i] + 0.114f * src[2 * hw + i];
    }
  } else {
    throw ArgumentError("unsupported channel conversion " + std::to_string(ic) + "->" +
                        std::to_string(oc));
  }
}

void adapt_one(const float* src, Shape3 in, float* dst, Shape3 out,
               std::vector<float>& scratch) {
  if (in == out) {
    std::memcpy(dst, src, size_t(in.numel()) * 4);
    return;
  }
  // channel conversion first, then spatial resize (both linear; order commutes)
  const float* chan = src;
  if (in.c != out.c) {
    scratch.resize(size_t(out.c) * in.h * in.w);
    convert_channels(src, in.c, in.h * in.w, scratch.data(), out.c);
    chan = scratch.data();
  }
  resize_bilinear_chw(chan, out.c, in.h, in.w, dst, out.h, out.w);
}

}  // namespace

Tensor adapt_images(const Tensor& nchw, Shape3 target) {
  CAMH_CHECK_ARG(nchw.ndim() == 4, "adapt_images: expected (N,C,H,W)");
  const Shape3 in{int(nchw.dim(1)), int(nchw.dim(2)), int(nchw.dim(3))};
  if (in == target) return nchw;
  const int64_t n = nchw.dim(0);
  Tensor out({n, target.c, target.h, target.w});
  parallel_for(n, [&](int64_t i0, int64_t i1) {
    std::vector<float> scratch;
    for (int64_t i = i0; i < i1; ++i) {
      adapt_one(nchw.data() + i * in.numel(), in, out.data() + i * target.numel(), target,
                scratch);
    }
  });
  return out;
}

LabeledBatch adapt_to_shape(const LabeledBatch& batch, Shape3 target) {
  return {adapt_images(batch.images, target), batch.labels};
}

DatasetHandle adapt_handle(DatasetHandle handle, Shape3 target) {
  handle.spec.input_shape = target;
  handle.validate();
  return handle;
}

// ---------------------------------------------------------------- native sources

namespace {

struct NativeSource {
  Shape3 shape;
  std::vector<int> labels;  // canonical record order
  std::function<void(int64_t, float*)> read_image;  // writes shape.numel() floats in [0,1]
};

std::string find_file(const std::vector<std::string>& candidates, const std::string& what) {
  for (const auto& c : candidates) {
    if (file_exists(c)) return c;
  }
  throw IoError(what + ": missing data file (tried " + candidates.front() + " ...)");
}

std::vector<uint8_t> read_maybe_gz(const std::string& path, const std::string& what) {
  // gzread transparently handles both gzip and plain files.
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError(what + ": cannot open " + path);
  std::vector<uint8_t> out;
  uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw DataIntegrityError(what + ": corrupt gzip stream in " + path);
  return out;
}

uint32_t be32_at(const std::vector<uint8_t>& v, size_t off) {
  return uint32_t(v[off]) << 24 | uint32_t(v[off + 1]) << 16 | uint32_t(v[off + 2]) << 8 |
         v[off + 3];
}

// --- MNIST IDX ---

NativeSource open_mnist(const std::string& dir, Split split, bool labels_only) {
  const std::string img_base = split == Split::train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
  const std::string lab_base = split == Split::train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
  const auto lab_path = find_file({dir + "/" + lab_base, dir + "/" + lab_base + ".gz"}, "mnist");
  const auto labels_raw = read_maybe_gz(lab_path, "mnist");
  if (labels_raw.size() < 8 || be32_at(labels_raw, 0) != 0x801) {
    throw DataIntegrityError("mnist: bad label file magic in " + lab_path);
  }
  const uint32_t n = be32_at(labels_raw, 4);
  if (labels_raw.size() != 8 + n) throw DataIntegrityError("mnist: truncated label file " + lab_path);

  NativeSource src;
  src.shape = {1, 28, 28};
  src.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    const uint8_t y = labels_raw[8 + i];
    if (y > 9) throw DataIntegrityError("mnist: label out of range in " + lab_path);
    src.labels[i] = y;
  }
  if (labels_only) return src;

  const auto img_path = find_file({dir + "/" + img_base, dir + "/" + img_base + ".gz"}, "mnist");
  auto images = std::make_shared<std::vector<uint8_t>>(read_maybe_gz(img_path, "mnist"));
  if (images->size() < 16 || be32_at(*images, 0) != 0x803 || be32_at(*images, 4) != n ||
      be32_at(*images, 8) != 28 || be32_at(*images, 12) != 28 ||
      images->size() != 16 + size_t(n) * 784) {
    throw DataIntegrityError("mnist: bad image file " + img_path);
  }
  src.read_image = [images](int64_t idx, float* dst) {
    const uint8_t* p = images->data() + 16 + size_t(idx) * 784;
    for (int i = 0; i < 784; ++i) dst[i] = float(p[i]) / 255.0f;
  };
  return src;
}

// --- CIFAR binary ---

NativeSource open_cifar(const std::string& dir, Split split, bool labels_only, bool is100,
                        bool cifarm_pool) {
  std::vector<std::string> files;
  if (!is100) {
    const std::string sub = file_exists(dir + "/cifar-10-batches-bin") ? dir + "/cifar-10-batches-bin" : dir;
    if (split == Split::train) {
      for (int i = 1; i <= 5; ++i) files.push_back(sub + "/data_batch_" + std::to_string(i) + ".bin");
    } else {
      files.push_back(sub + "/test_batch.bin");
    }
  } else {
    const std::string sub = file_exists(dir + "/cifar-100-binary") ? dir + "/cifar-100-binary" : dir;
    if (cifarm_pool && split == Split::train) {
      files = {sub + "/train.bin", sub + "/test.bin"};  // full 600-per-class pool
    } else if (split == Split::train) {
      files = {sub + "/train.bin"};
    } else {
      files = {sub + "/test.bin"};
    }
  }
  const std::string what = is100 ? "cifar100" : "cifar10";
  const size_t rec = is100 ? 3074 : 3073;  // [coarse,]fine + 3072 pixels
  auto buf = std::make_shared<std::vector<uint8_t>>();
  for (const auto& f : files) {
    if (!file_exists(f)) throw IoError(what + ": missing data file " + f);
    const std::string s = read_file(f);
    if (s.size() % rec != 0) throw DataIntegrityError(what + ": bad record size in " + f);
    buf->insert(buf->end(), s.begin(), s.end());
  }
  const int64_t n = int64_t(buf->size() / rec);
  const size_t lab_off = is100 ? 1 : 0;  // fine label after coarse
  const int max_label = is100 ? 99 : 9;

  NativeSource src;
  src.shape = {3, 32, 32};
  src.labels.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t y = (*buf)[size_t(i) * rec + lab_off];
    if (y > max_label) throw DataIntegrityError(what + ": label out of range");
    src.labels[size_t(i)] = y;
  }
  if (labels_only) return src;
  src.read_image = [buf, rec, lab_off](int64_t idx, float* dst) {
    const uint8_t* p = buf->data() + size_t(idx) * rec + lab_off + 1;
    for (int i = 0; i < 3072; ++i) dst[i] = float(p[i]) / 255.0f;
  };
  return src;
}

// --- SVHN (MATLAB v5 .mat) ---

std::vector<uint8_t> zlib_inflate_all(const uint8_t* p, size_t n, const std::string& what) {
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw IoError(what + ": inflateInit failed");
  std::vector<uint8_t> out(std::max<size_t>(n * 4, 1 << 20));
  zs.next_in = const_cast<Bytef*>(p);
  zs.avail_in = uInt(n);
  size_t produced = 0;
  int ret = Z_OK;
  while (ret != Z_STREAM_END) {
    if (produced == out.size()) out.resize(out.size() * 2);
    zs.next_out = out.data() + produced;
    zs.avail_out = uInt(out.size() - produced);
    ret = inflate(&zs, Z_NO_FLUSH);
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataIntegrityError(what + ": corrupt compressed element");
    }
    produced = out.size() - zs.avail_out;
  }
  inflateEnd(&zs);
  out.resize(produced);
  return out;
}

struct MatVar {
  std::vector<int64_t> dims;
  int mat_class = 0;                // 6 = double, 9 = uint8, ...
  std::vector<uint8_t> u8;
  std::vector<double> f64;
};

void parse_mat_matrix(const uint8_t* p, size_t n, std::map<std::string, MatVar>& out,
                      const std::string& what) {
  size_t off = 0;
  auto rd_u32 = [&](size_t o) {
    uint32_t v;
    std::memcpy(&v, p + o, 4);
    return v;
  };
  // subelement iterator (handles small-element packing)
  auto next_sub = [&](uint32_t& type, const uint8_t*& data, size_t& len) {
    if (off + 8 > n) throw DataIntegrityError(what + ": truncated matrix element");
    const uint32_t tag = rd_u32(off);
    if (tag & 0xffff0000u) {  // small element
      type = tag & 0xffffu;
      len = tag >> 16;
      data = p + off + 4;
      off += 8;
    } else {
      type = tag;
      len = rd_u32(off + 4);
      data = p + off + 8;
      off += 8 + (len + 7) / 8 * 8;
    }
    if (data + len > p + n) throw DataIntegrityError(what + ": truncated matrix payload");
  };

  uint32_t type;
  const uint8_t* data;
  size_t len;

  next_sub(type, data, len);  // array flags
  if (type != 6 || len < 8) throw DataIntegrityError(what + ": bad array flags");
  MatVar var;
  var.mat_class = data[0];

  next_sub(type, data, len);  // dimensions
  if (type != 5) throw DataIntegrityError(what + ": bad dimensions element");
  for (size_t i = 0; i + 4 <= len; i += 4) {
    int32_t d;
    std::memcpy(&d, data + i, 4);
    var.dims.push_back(d);
  }

  next_sub(type, data, len);  // name
  const std::string name(reinterpret_cast<const char*>(data), len);

  next_sub(type, data, len);  // real part
  int64_t count = 1;
  for (int64_t d : var.dims) count *= d;
  if (type == 2 || type == 1) {  // uint8 / int8
    if (int64_t(len) < count) throw DataIntegrityError(what + ": short uint8 data");
    var.u8.assign(data, data + count);
  } else if (type == 9) {  // double
    if (int64_t(len) < count * 8) throw DataIntegrityError(what + ": short double data");
    var.f64.resize(size_t(count));
    std::memcpy(var.f64.data(), data, size_t(count) * 8);
  } else if (type == 7) {  // single
    if (int64_t(len) < count * 4) throw DataIntegrityError(what + ": short single data");
    var.f64.resize(size_t(count));
    for (int64_t i = 0; i < count; ++i) {
      float v;
      std::memcpy(&v, data + i * 4, 4);
      var.f64[size_t(i)] = v;
    }
  } else {
    throw DataIntegrityError(what + ": unsupported mat data type " + std::to_string(type));
  }
  out.emplace(name, std::move(var));
}

std::map<std::string, MatVar> read_mat5(const std::string& path, const std::string& what) {
  const std::string s = read_file(path);
  if (s.size() < 128) throw DataIntegrityError(what + ": not a MAT-file: " + path);
  const uint8_t* p = reinterpret_cast<const uint8_t*>(s.data());
  if (!(p[126] == 'I' && p[127] == 'M')) {
    throw DataIntegrityError(what + ": unsupported MAT-file endianness in " + path);
  }
  std::map<std::string, MatVar> vars;
  size_t off = 128;
  while (off + 8 <= s.size()) {
    uint32_t type, len;
    std::memcpy(&type, p + off, 4);
    std::memcpy(&len, p + off + 4, 4);
    const uint8_t* payload = p + off + 8;
    if (payload + len > p + s.size()) throw DataIntegrityError(what + ": truncated element in " + path);
    if (type == 15) {  // miCOMPRESSED
      const auto raw = zlib_inflate_all(payload, len, what);
      if (raw.size() >= 8) {
        uint32_t itype, ilen;
        std::memcpy(&itype, raw.data(), 4);
        std::memcpy(&ilen, raw.data() + 4, 4);
        if (itype == 14 && ilen <= raw.size() - 8) {
          parse_mat_matrix(raw.data() + 8, ilen, vars, what);
        }
      }
    } else if (type == 14) {  // miMATRIX
      parse_mat_matrix(payload, len, vars, what);
    }
    off += 8 + (size_t(len) + 7) / 8 * 8;
  }
  return vars;
}

NativeSource open_svhn(const std::string& dir, Split split, bool labels_only) {
  const std::string base = split == Split::train ? "train_32x32.mat" : "test_32x32.mat";
  const std::string path = find_file({dir + "/" + base}, "svhn");
  auto vars = std::make_shared<std::map<std::string, MatVar>>(read_mat5(path, "svhn"));
  auto yit = vars->find("y");
  auto xit = vars->find("X");
  if (yit == vars->end() || xit == vars->end()) {
    throw DataIntegrityError("svhn: variables X/y not found in " + path);
  }
  const MatVar& y = yit->second;
  const MatVar& x = xit->second;
  if (x.dims.size() != 4 || x.dims[0] != 32 || x.dims[1] != 32 || x.dims[2] != 3) {
    throw DataIntegrityError("svhn: unexpected X dims in " + path);
  }
  const int64_t n = x.dims[3];

  NativeSource src;
  src.shape = {3, 32, 32};
  src.labels.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    const int v = y.u8.empty() ? int(y.f64.at(size_t(i))) : int(y.u8.at(size_t(i)));
    if (v < 1 || v > 10) throw DataIntegrityError("svhn: label out of range in " + path);
    src.labels[size_t(i)] = v % 10;  // SVHN stores digit 0 as class 10
  }
  if (labels_only) return src;
  if (int64_t(x.u8.size()) != n * 3072) throw DataIntegrityError("svhn: short X data in " + path);
  src.read_image = [vars](int64_t idx, float* dst) {
    const auto& xv = vars->at("X").u8;
    // column-major (h, w, c, n) -> CHW
    for (int c = 0; c < 3; ++c) {
      for (int h = 0; h < 32; ++h) {
        for (int w = 0; w < 32; ++w) {
          const size_t src_i = size_t(h) + 32 * (size_t(w) + 32 * (size_t(c) + 3 * size_t(idx)));
          dst[(c * 32 + h) * 32 + w] = float(xv[src_i]) / 255.0f;
        }
      }
    }
  };
  return src;
}

}  // namespace

// --- GTSRB (PPM directories) ---

Tensor read_ppm(const std::string& path) {
  const std::string s = read_file(path);
  size_t off = 0;
  auto skip_ws = [&] {
    while (off < s.size()) {
      if (std::isspace(uint8_t(s[off]))) {
        ++off;
      } else if (s[off] == '#') {
        while (off < s.size() && s[off] != '\n') ++off;
      } else {
        break;
      }
    }
  };
  auto read_int = [&] {
    skip_ws();
    int v = 0;
    bool any = false;
    while (off < s.size() && std::isdigit(uint8_t(s[off]))) {
      v = v * 10 + (s[off] - '0');
      ++off;
      any = true;
    }
    if (!any) throw DataIntegrityError("gtsrb: malformed PPM header in " + path);
    return v;
  };
  if (s.size() < 2 || s[0] != 'P' || s[1] != '6') {
    throw DataIntegrityError("gtsrb: not a P6 PPM: " + path);
  }
  off = 2;
  const int w = read_int();
  const int h = read_int();
  const int maxv = read_int();
  ++off;  // single whitespace after maxval
  if (maxv != 255 || off + size_t(w) * h * 3 > s.size()) {
    throw DataIntegrityError("gtsrb: unsupported or truncated PPM: " + path);
  }
  Tensor img({3, h, w});
  const uint8_t* p = reinterpret_cast<const uint8_t*>(s.data()) + off;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img[(int64_t(c) * h + y) * w + x] = float(p[(size_t(y) * w + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return img;
}

namespace {

NativeSource open_gtsrb(const std::string& dir, Split split, bool labels_only) {
  auto files = std::make_shared<std::vector<std::string>>();
  NativeSource src;
  src.shape = {3, 32, 32};

  if (split == Split::train) {
    std::string images_dir;
    for (const std::string& cand :
         {dir + "/GTSRB/Final_Training/Images", dir + "/Final_Training/Images", dir + "/Images"}) {
      if (fs::is_directory(cand)) {
        images_dir = cand;
        break;
      }
    }
    if (images_dir.empty()) throw IoError("gtsrb: missing training image directory under " + dir);
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(images_dir)) {
      if (e.is_directory()) class_dirs.push_back(e.path().string());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& cd : class_dirs) {
      const int label = std::atoi(fs::path(cd).filename().string().c_str());
      if (label < 0 || label > 42) throw DataIntegrityError("gtsrb: unexpected class dir " + cd);
      std::vector<std::string> ppms;
      for (const auto& e : fs::directory_iterator(cd)) {
        if (e.path().extension() == ".ppm") ppms.push_back(e.path().string());
      }
      std::sort(ppms.begin(), ppms.end());
      for (auto& f : ppms) {
        files->push_back(std::move(f));
        src.labels.push_back(label);
      }
    }
  } else {
    std::string images_dir;
    for (const std::string& cand :
         {dir + "/GTSRB/Final_Test/Images", dir + "/Final_Test/Images"}) {
      if (fs::is_directory(cand)) {
        images_dir = cand;
        break;
      }
    }
    if (images_dir.empty()) throw IoError("gtsrb: missing test image directory under " + dir);
    std::string csv_path;
    for (const std::string& cand :
         {dir + "/GT-final_test.csv", images_dir + "/GT-final_test.csv"}) {
      if (file_exists(cand)) {
        csv_path = cand;
        break;
      }
    }
    if (csv_path.empty()) throw IoError("gtsrb: missing GT-final_test.csv under " + dir);
    const auto rows = parse_csv(read_file(csv_path));
    for (size_t i = 1; i < rows.size(); ++i) {  // skip header
      if (rows[i].empty() || rows[i][0].empty()) continue;
      // semicolon-separated single cell: Filename;W;H;RoiX1;RoiY1;RoiX2;RoiY2;ClassId
      std::vector<std::string> parts;
      std::string cur;
      for (char c : rows[i][0]) {
        if (c == ';') {
          parts.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      parts.push_back(cur);
      if (parts.size() < 8) throw DataIntegrityError("gtsrb: malformed row in " + csv_path);
      files->push_back(images_dir + "/" + parts[0]);
      const int label = std::atoi(parts[7].c_str());
      if (label < 0 || label > 42) throw DataIntegrityError("gtsrb: label out of range in " + csv_path);
      src.labels.push_back(label);
    }
  }

  if (labels_only) return src;
  src.read_image = [files](int64_t idx, float* dst) {
    const Tensor img = read_ppm((*files)[size_t(idx)]);
    std::vector<float> scratch;
    resize_bilinear_chw(img.data(), 3, int(img.dim(1)), int(img.dim(2)), dst, 32, 32);
  };
  return src;
}

// --- synthetic gratings ---

void synth_image(Shape3 shape, int num_classes, int label, uint64_t seed, Split split,
                 int64_t idx, float* dst) {
  // the seed defines the task (class-pattern frame), the index the sample
  Rng task = Rng(seed).fork("synth_task");
  const double angle_offset = task.uniform(0.0, M_PI);
  const int freq_shift = int(task.uniform_int(3));
  const double phase_base = task.uniform(-M_PI, M_PI);
  Rng r = Rng(seed).fork(split == Split::train ? "synth_train" : "synth_test", uint64_t(idx));
  // +-0.12 rad orientation jitter: below ~13 classes the class wedges stay
  // disjoint; beyond that neighboring classes genuinely overlap
  const double angle = angle_offset + M_PI * double(label) / double(num_classes) +
                       r.uniform(-0.12, 0.12);
  const double freq = 2.0 + double((label + freq_shift) % 3);
  const double phase = phase_base + r.uniform(-0.5, 0.5);
  const double ca = std::cos(angle), sa = std::sin(angle);
  const int hw = shape.h * shape.w;
  for (int y = 0; y < shape.h; ++y) {
    for (int x = 0; x < shape.w; ++x) {
      const double u = (x + 0.5) / shape.w;
      const double v = (y + 0.5) / shape.h;
      const double t = 2.0 * M_PI * freq * (u * ca + v * sa) + phase;
      double val = 0.5 + 0.33 * std::sin(t) + r.normal(0.0, 0.03);
      val = std::min(std::max(val, 0.0), 1.0);
      dst[y * shape.w + x] = float(val);
    }
  }
  for (int c = 1; c < shape.c; ++c) std::memcpy(dst + c * hw, dst, size_t(hw) * 4);
}

NativeSource open_synthetic(const DatasetHandle& h, Split split, bool labels_only) {
  NativeSource src;
  src.shape = h.native_shape;
  const int64_t n = split == Split::train ? h.native_train_count : h.native_test_count;
  src.labels.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) src.labels[size_t(i)] = int(i % h.spec.num_classes);
  if (labels_only) return src;
  const Shape3 shape = h.native_shape;
  const int k = h.spec.num_classes;
  const uint64_t seed = h.seed;
  src.read_image = [shape, k, seed, split](int64_t idx, float* dst) {
    synth_image(shape, k, int(idx % k), seed, split, idx, dst);
  };
  return src;
}

NativeSource open_native(const DatasetHandle& h, Split split, const std::string& data_root,
                         bool labels_only) {
  const std::string dir =
      data_root + "/" + (h.source_uri.empty() ? h.source : h.source_uri);
  if (h.source == "synthetic") return open_synthetic(h, split, labels_only);
  if (h.source == "mnist") return open_mnist(dir, split, labels_only);
  if (h.source == "cifar10") return open_cifar(dir, split, labels_only, false, false);
  if (h.source == "cifar100") return open_cifar(dir, split, labels_only, true, false);
  if (h.source == "cifarm") return open_cifar(dir, split, labels_only, true, true);
  if (h.source == "svhn") return open_svhn(dir, split, labels_only);
  if (h.source == "gtsrb") return open_gtsrb(dir, split, labels_only);
  throw ArgumentError("unknown dataset source: " + h.source);
}

// ---------------------------------------------------------------- view planning

// Largest-remainder apportionment of `total` across class counts.
std::vector<int64_t> apportion(const std::vector<int64_t>& counts, int64_t total) {
  const int64_t n = [&] {
    int64_t s = 0;
    for (int64_t c : counts) s += c;
    return s;
  }();
  std::vector<int64_t> target(counts.size(), 0);
  if (n == 0 || total >= n) {
    return counts;  // keep everything
  }
  std::vector<std::pair<double, size_t>> rem;
  int64_t assigned = 0;
  for (size_t c = 0; c < counts.size(); ++c) {
    const double exact = double(total) * double(counts[c]) / double(n);
    target[c] = int64_t(exact);
    assigned += target[c];
    rem.push_back({exact - double(target[c]), c});
  }
  std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // tie -> lower class id
  });
  for (int64_t i = 0; i < total - assigned; ++i) {
    const size_t c = rem[size_t(i)].second;
    if (target[c] < counts[c]) {
      ++target[c];
    } else {
      // class exhausted; push the unit to the next eligible class
      for (auto& [r, cc] : rem) {
        if (target[cc] < counts[cc]) {
          ++target[cc];
          break;
        }
      }
    }
  }
  return target;
}

// filtered = class_keep applied, canonical record order; sel = positions into
// filtered (explicit subset for train, else a stratified cap, else all).
// train_subset indices are always relative to the filtered-uncapped order.
struct ViewPlan {
  std::vector<int64_t> filtered_base;  // native record indices
  std::vector<int> filtered_labels;    // remapped
  std::vector<int64_t> sel;

  std::vector<int64_t> base_indices() const {
    std::vector<int64_t> out;
    out.reserve(sel.size());
    for (int64_t p : sel) out.push_back(filtered_base[size_t(p)]);
    return out;
  }
  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(sel.size());
    for (int64_t p : sel) out.push_back(filtered_labels[size_t(p)]);
    return out;
  }
};

ViewPlan plan_view(const DatasetHandle& h, Split split, const std::vector<int>& native_labels) {
  ViewPlan plan;
  std::vector<int> remap;
  if (!h.class_keep.empty()) {
    int max_orig = 0;
    for (int c : h.class_keep) max_orig = std::max(max_orig, c);
    remap.assign(size_t(max_orig) + 1, -1);
    for (size_t i = 0; i < h.class_keep.size(); ++i) remap[size_t(h.class_keep[i])] = int(i);
  }
  for (size_t i = 0; i < native_labels.size(); ++i) {
    int y = native_labels[i];
    if (!remap.empty()) {
      y = (y >= 0 && y < int(remap.size())) ? remap[size_t(y)] : -1;
      if (y < 0) continue;
    }
    CAMH_CHECK_ARG(y >= 0 && y < h.spec.num_classes, "dataset: label outside remap domain");
    plan.filtered_base.push_back(int64_t(i));
    plan.filtered_labels.push_back(y);
  }
  const int64_t fn = int64_t(plan.filtered_base.size());
  if (split == Split::train && !h.train_subset.empty()) {
    plan.sel.reserve(h.train_subset.size());
    for (int64_t pos : h.train_subset) {
      CAMH_CHECK_ARG(pos >= 0 && pos < fn, "DatasetHandle: train_subset index out of range");
      plan.sel.push_back(pos);
    }
    return plan;
  }
  const int64_t cap = split == Split::train ? h.spec.train_count : h.spec.test_count;
  if (cap < fn) {
    std::vector<int64_t> counts(size_t(h.spec.num_classes), 0);
    for (int y : plan.filtered_labels) ++counts[size_t(y)];
    const auto target = apportion(counts, cap);
    std::vector<int64_t> taken(size_t(h.spec.num_classes), 0);
    for (int64_t i = 0; i < fn; ++i) {
      const int y = plan.filtered_labels[size_t(i)];
      if (taken[size_t(y)] < target[size_t(y)]) {
        ++taken[size_t(y)];
        plan.sel.push_back(i);
      }
    }
  } else {
    plan.sel.resize(size_t(fn));
    for (int64_t i = 0; i < fn; ++i) plan.sel[size_t(i)] = i;
  }
  return plan;
}

}  // namespace

// ---------------------------------------------------------------- loading

std::vector<int> load_labels(const DatasetHandle& handle, Split split,
                             const std::string& data_root) {
  handle.validate();
  const auto src = open_native(handle, split, resolve_data_root(data_root), true);
  return plan_view(handle, split, src.labels).labels();
}

InMemoryDataset load_split(const DatasetHandle& handle, Split split,
                           const std::string& data_root) {
  handle.validate();
  const auto src = open_native(handle, split, resolve_data_root(data_root), false);
  const auto plan = plan_view(handle, split, src.labels);
  const auto base = plan.base_indices();
  const int64_t n = int64_t(base.size());
  const Shape3 native = src.shape;

  InMemoryDataset ds;
  ds.spec = handle.spec;
  ds.labels = plan.labels();
  Tensor raw({n, native.c, native.h, native.w});
  parallel_for(n, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      src.read_image(base[size_t(i)], raw.data() + i * native.numel());
    }
  });
  ds.images = adapt_images(raw, handle.spec.input_shape);
  return ds;
}

BatchStream load_dataset(const DatasetHandle& handle, Split split, const LoadOptions& opts) {
  CAMH_CHECK_ARG(opts.batch_size >= 1, "load_dataset: batch_size must be >= 1");
  return BatchStream(load_split(handle, split, opts.data_root), opts.batch_size,
                     opts.shuffle_seed);
}

BatchStream::BatchStream(InMemoryDataset data, int64_t batch_size,
                         std::optional<uint64_t> shuffle_seed)
    : data_(std::move(data)), batch_size_(batch_size) {
  reset(shuffle_seed);
}

void BatchStream::reset(std::optional<uint64_t> shuffle_seed) {
  const int64_t n = data_.size();
  order_.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) order_[size_t(i)] = i;
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(order_);
  }
  cursor_ = 0;
}

std::optional<LabeledBatch> BatchStream::next() {
  const int64_t n = data_.size();
  if (cursor_ >= n) return std::nullopt;
  const int64_t b = std::min(batch_size_, n - cursor_);
  const int64_t item = data_.images.numel() / std::max<int64_t>(n, 1);
  LabeledBatch batch;
  batch.images = Tensor({b, data_.images.dim(1), data_.images.dim(2), data_.images.dim(3)});
  batch.labels.resize(size_t(b));
  for (int64_t i = 0; i < b; ++i) {
    const int64_t j = order_[size_t(cursor_ + i)];
    std::memcpy(batch.images.data() + i * item, data_.images.data() + j * item,
                size_t(item) * 4);
    batch.labels[size_t(i)] = data_.labels[size_t(j)];
  }
  cursor_ += b;
  return batch;
}

// ---------------------------------------------------------------- derivations

DatasetHandle with_counts(DatasetHandle handle, int64_t train_count, int64_t test_count) {
  CAMH_CHECK_ARG(handle.train_subset.empty(),
                 "with_counts: cannot re-cap a handle with an explicit subset");
  handle.spec.train_count = std::min(train_count, handle.spec.train_count);
  handle.spec.test_count = std::min(test_count, handle.spec.test_count);
  handle.validate();
  return handle;
}

DatasetHandle subsample_fraction(const DatasetHandle& handle, double fraction, uint64_t seed,
                                 const std::string& data_root) {
  handle.validate();
  CAMH_CHECK_ARG(fraction > 0.0 && fraction <= 1.0,
                 "subsample_fraction: fraction must be in (0,1]");
  if (fraction == 1.0) return handle;

  const auto src = open_native(handle, Split::train, resolve_data_root(data_root), true);
  const auto plan = plan_view(handle, Split::train, src.labels);
  const std::vector<int> labels = plan.labels();
  const int64_t n = int64_t(labels.size());
  const int64_t total = int64_t(fraction * double(n));
  if (total < handle.spec.num_classes) {
    throw DegenerateSubsetError("subsample_fraction: " + std::to_string(total) +
                                " examples cannot cover " +
                                std::to_string(handle.spec.num_classes) + " classes");
  }

  std::vector<std::vector<int64_t>> by_class(size_t(handle.spec.num_classes));
  for (int64_t i = 0; i < n; ++i) by_class[size_t(labels[size_t(i)])].push_back(i);
  std::vector<int64_t> counts;
  counts.reserve(by_class.size());
  for (const auto& v : by_class) counts.push_back(int64_t(v.size()));
  const auto target = apportion(counts, total);

  Rng base(seed);
  std::vector<int64_t> picked;
  picked.reserve(size_t(total));
  for (size_t c = 0; c < by_class.size(); ++c) {
    Rng rng = base.fork("subsample", uint64_t(c));
    const auto chosen = rng.sample_without_replacement(int(by_class[c].size()), int(target[c]));
    // compose view position -> filtered-uncapped index through the current selection
    for (int s : chosen) picked.push_back(plan.sel[size_t(by_class[c][size_t(s)])]);
  }
  std::sort(picked.begin(), picked.end());

  DatasetHandle out = handle;
  out.train_subset = std::move(picked);
  out.spec.train_count = total;
  out.fraction = handle.fraction * fraction;
  return out;
}

}  // namespace camh
