#include "camh/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>

#include "camh/parallel.hpp"

namespace camh::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

namespace {

// Fixed 128-row blocks, independent of the worker count, so results stay
// bit-identical for any CAMH_THREADS setting.
constexpr int64_t kGemmBlock = 128;

template <typename Fn>
void for_row_blocks(int64_t rows, Fn&& fn) {
  const int64_t blocks = (rows + kGemmBlock - 1) / kGemmBlock;
  parallel_for(blocks, [&](int64_t b0, int64_t b1) {
    for (int64_t b = b0; b < b1; ++b) {
      const int64_t r0 = b * kGemmBlock;
      fn(r0, std::min(rows, r0 + kGemmBlock));
    }
  });
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_ch, int out_ch, int ksize, int stride, int pad, Rng& rng)
    : in_ch_(in_ch), out_ch_(out_ch), k_(ksize), stride_(stride), pad_(pad) {
  weight_ = Tensor({out_ch, int64_t(in_ch) * ksize * ksize});
  bias_ = Tensor({out_ch});
  const double std = std::sqrt(2.0 / (double(in_ch) * ksize * ksize));
  weight_.init_normal(rng, 0.0f, float(std));
  dweight_ = Tensor(weight_.shape());
  dbias_ = Tensor(bias_.shape());
}

namespace {

// cols: (B*OH*OW, IC*K*K), row index = (n, oy, ox).
void im2col(const Tensor& x, int k, int stride, int pad, int oh, int ow, Tensor& cols) {
  const int64_t b = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t patch = ic * k * k;
  parallel_for(b, [&](int64_t n0, int64_t n1) {
    for (int64_t n = n0; n < n1; ++n) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          float* dst = cols.data() + ((n * oh + oy) * ow + ox) * patch;
          for (int64_t c = 0; c < ic; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int64_t iy = oy * stride + ky - pad;
              for (int kx = 0; kx < k; ++kx) {
                const int64_t ix = ox * stride + kx - pad;
                *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                             ? x.at4(n, c, iy, ix)
                             : 0.0f;
              }
            }
          }
        }
      }
    }
  });
}

void col2im(const Tensor& dcols, int k, int stride, int pad, int oh, int ow, Tensor& dx) {
  const int64_t b = dx.dim(0), ic = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  const int64_t patch = ic * k * k;
  parallel_for(b, [&](int64_t n0, int64_t n1) {
    for (int64_t n = n0; n < n1; ++n) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          const float* src = dcols.data() + ((n * oh + oy) * ow + ox) * patch;
          for (int64_t c = 0; c < ic; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int64_t iy = oy * stride + ky - pad;
              for (int kx = 0; kx < k; ++kx) {
                const int64_t ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                  dx.at4(n, c, iy, ix) += *src;
                }
                ++src;
              }
            }
          }
        }
      }
    }
  });
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, Mode mode) {
  CAMH_CHECK_ARG(x.ndim() == 4 && x.dim(1) == in_ch_, "conv2d: bad input shape");
  const int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = int((h + 2 * pad_ - k_) / stride_) + 1;
  const int ow = int((w + 2 * pad_ - k_) / stride_) + 1;
  const int64_t patch = int64_t(in_ch_) * k_ * k_;

  Tensor cols({b * oh * ow, patch});
  im2col(x, k_, stride_, pad_, oh, ow, cols);

  RowMat prod(b * oh * ow, out_ch_);
  {
    CMapRM mc(cols.data(), b * oh * ow, patch);
    CMapRM mw(weight_.data(), out_ch_, patch);
    for_row_blocks(b * oh * ow, [&](int64_t r0, int64_t r1) {
      prod.middleRows(r0, r1 - r0).noalias() = mc.middleRows(r0, r1 - r0) * mw.transpose();
    });
  }

  Tensor out({b, out_ch_, oh, ow});
  parallel_for(b, [&](int64_t n0, int64_t n1) {
    for (int64_t n = n0; n < n1; ++n) {
      for (int64_t oc = 0; oc < out_ch_; ++oc) {
        const float bv = bias_[oc];
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            out.at4(n, oc, oy, ox) = prod((n * oh + oy) * ow + ox, oc) + bv;
          }
        }
      }
    }
  });

  if (mode != Mode::kEval) cached_in_ = x;
  return out;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Tensor& x = cached_in_;
  const int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int64_t oh = dy.dim(2), ow = dy.dim(3);
  const int64_t patch = int64_t(in_ch_) * k_ * k_;

  Tensor cols({b * oh * ow, patch});
  im2col(x, k_, stride_, pad_, int(oh), int(ow), cols);

  // Gather dy into (B*OH*OW, OC) row-major.
  Tensor dyr({b * oh * ow, int64_t(out_ch_)});
  parallel_for(b, [&](int64_t n0, int64_t n1) {
    for (int64_t n = n0; n < n1; ++n) {
      for (int64_t oc = 0; oc < out_ch_; ++oc) {
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            dyr.at2((n * oh + oy) * ow + ox, oc) = dy.at4(n, oc, oy, ox);
          }
        }
      }
    }
  });

  {
    CMapRM mdy(dyr.data(), b * oh * ow, out_ch_);
    CMapRM mc(cols.data(), b * oh * ow, patch);
    MapRM mdw(dweight_.data(), out_ch_, patch);
    // fixed 8-channel blocks: every weight row sees one fixed-shape Eigen
    // call, so the reduction order never depends on the worker count
    const int64_t cblocks = (out_ch_ + 7) / 8;
    parallel_for(cblocks, [&](int64_t b0, int64_t b1) {
      for (int64_t blk = b0; blk < b1; ++blk) {
        const int64_t c0 = blk * 8;
        const int64_t c1 = std::min<int64_t>(out_ch_, c0 + 8);
        mdw.middleRows(c0, c1 - c0).noalias() +=
            mdy.middleCols(c0, c1 - c0).transpose() * mc;
        for (int64_t oc = c0; oc < c1; ++oc) dbias_[oc] += mdy.col(oc).sum();
      }
    });
  }

  Tensor dcols({b * oh * ow, patch});
  {
    CMapRM mdy(dyr.data(), b * oh * ow, out_ch_);
    CMapRM mw(weight_.data(), out_ch_, patch);
    MapRM mdc(dcols.data(), b * oh * ow, patch);
    for_row_blocks(b * oh * ow, [&](int64_t r0, int64_t r1) {
      mdc.middleRows(r0, r1 - r0).noalias() = mdy.middleRows(r0, r1 - r0) * mw;
    });
  }

  Tensor dx({b, int64_t(in_ch_), h, w});
  col2im(dcols, k_, stride_, pad_, int(oh), int(ow), dx);
  return dx;
}

void Conv2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight_, &dweight_});
  out.push_back({prefix + ".bias", &bias_, &dbias_});
}

void Conv2d::zero_grads() {
  dweight_.fill(0.0f);
  dbias_.fill(0.0f);
}

// ---------------------------------------------------------------- Dense

Dense::Dense(int in_dim, int out_dim, Rng& rng) : in_dim_(in_dim), out_dim_(out_dim) {
  weight_ = Tensor({out_dim, in_dim});
  bias_ = Tensor({out_dim});
  weight_.init_normal(rng, 0.0f, float(std::sqrt(2.0 / in_dim)));
  dweight_ = Tensor(weight_.shape());
  dbias_ = Tensor(bias_.shape());
}

Tensor Dense::forward(const Tensor& x, Mode mode) {
  CAMH_CHECK_ARG(x.ndim() == 2 && x.dim(1) == in_dim_, "dense: bad input shape");
  const int64_t b = x.dim(0);
  Tensor out({b, int64_t(out_dim_)});
  {
    CMapRM mx(x.data(), b, in_dim_);
    CMapRM mw(weight_.data(), out_dim_, in_dim_);
    MapRM mo(out.data(), b, out_dim_);
    mo.noalias() = mx * mw.transpose();
    for (int64_t n = 0; n < b; ++n) {
      for (int64_t j = 0; j < out_dim_; ++j) out.at2(n, j) += bias_[j];
    }
  }
  if (mode != Mode::kEval) cached_in_ = x;
  return out;
}

Tensor Dense::backward(const Tensor& dy) {
  const Tensor& x = cached_in_;
  const int64_t b = x.dim(0);
  Tensor dx({b, int64_t(in_dim_)});
  CMapRM mdy(dy.data(), b, out_dim_);
  CMapRM mx(x.data(), b, in_dim_);
  CMapRM mw(weight_.data(), out_dim_, in_dim_);
  MapRM mdw(dweight_.data(), out_dim_, in_dim_);
  MapRM mdx(dx.data(), b, in_dim_);
  mdw.noalias() += mdy.transpose() * mx;
  for (int64_t j = 0; j < out_dim_; ++j) dbias_[j] += mdy.col(j).sum();
  mdx.noalias() = mdy * mw;
  return dx;
}

void Dense::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight_, &dweight_});
  out.push_back({prefix + ".bias", &bias_, &dbias_});
}

void Dense::zero_grads() {
  dweight_.fill(0.0f);
  dbias_.fill(0.0f);
}

// ---------------------------------------------------------------- Relu

Tensor Relu::forward(const Tensor& x, Mode mode) {
  Tensor out = x;
  float* p = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) p[i] = p[i] > 0.0f ? p[i] : 0.0f;
  if (mode != Mode::kEval) cached_out_ = out;
  return out;
}

Tensor Relu::backward(const Tensor& dy) {
  Tensor dx = dy;
  for (int64_t i = 0; i < dx.numel(); ++i) {
    if (cached_out_[i] <= 0.0f) dx[i] = 0.0f;
  }
  return dx;
}

// ---------------------------------------------------------------- MaxPool2d

Tensor MaxPool2d::forward(const Tensor& x, Mode mode) {
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = (h - k_) / stride_ + 1;
  const int64_t ow = (w - k_) / stride_ + 1;
  Tensor out({b, c, oh, ow});
  const bool keep = mode != Mode::kEval;
  std::vector<int32_t> arg;
  if (keep) arg.assign(size_t(out.numel()), 0);
  parallel_for(b * c, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const int64_t n = i / c, ch = i % c;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          float best = -std::numeric_limits<float>::infinity();
          int32_t besti = 0;
          for (int ky = 0; ky < k_; ++ky) {
            for (int kx = 0; kx < k_; ++kx) {
              const int64_t iy = oy * stride_ + ky;
              const int64_t ix = ox * stride_ + kx;
              const float v = x.at4(n, ch, iy, ix);
              if (v > best) {  // first max wins on ties
                best = v;
                besti = int32_t(iy * w + ix);
              }
            }
          }
          out.at4(n, ch, oy, ox) = best;
          if (keep) arg[size_t(((n * c + ch) * oh + oy) * ow + ox)] = besti;
        }
      }
    }
  });
  if (keep) {
    in_shape_ = x.shape();
    argmax_ = std::move(arg);
  }
  return out;
}

Tensor MaxPool2d::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const int64_t b = dy.dim(0), c = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
  const int64_t hw = in_shape_[2] * in_shape_[3];
  parallel_for(b * c, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      const int64_t n = i / c, ch = i % c;
      float* dxp = dx.data() + (n * c + ch) * hw;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          const int64_t oi = ((n * c + ch) * oh + oy) * ow + ox;
          dxp[argmax_[size_t(oi)]] += dy[oi];
        }
      }
    }
  });
  return dx;
}

// ---------------------------------------------------------------- pools/flatten

Tensor GlobalAvgPool::forward(const Tensor& x, Mode mode) {
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({b, c});
  for (int64_t n = 0; n < b; ++n) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* p = x.data() + (n * c + ch) * hw;
      double s = 0.0;
      for (int64_t i = 0; i < hw; ++i) s += p[i];
      out.at2(n, ch) = float(s / double(hw));
    }
  }
  if (mode != Mode::kEval) in_shape_ = x.shape();
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx(in_shape_);
  const int64_t b = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  const float inv = 1.0f / float(hw);
  for (int64_t n = 0; n < b; ++n) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float g = dy.at2(n, ch) * inv;
      float* p = dx.data() + (n * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = g;
    }
  }
  return dx;
}

Tensor Flatten::forward(const Tensor& x, Mode mode) {
  if (mode != Mode::kEval) in_shape_ = x.shape();
  return x.reshaped({x.dim(0), x.numel() / x.dim(0)});
}

Tensor Flatten::backward(const Tensor& dy) { return dy.reshaped(in_shape_); }

// ---------------------------------------------------------------- Dropout

Tensor Dropout::forward(const Tensor& x, Mode mode) {
  if (mode != Mode::kEval) active_ = mode == Mode::kTrain && rate_ > 0.0f;
  if (mode != Mode::kTrain || rate_ <= 0.0f) return x;
  const float keep = 1.0f - rate_;
  mask_ = Tensor(x.shape());
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const float m = rng_.uniform() < keep ? 1.0f / keep : 0.0f;
    mask_[i] = m;
    out[i] = x[i] * m;
  }
  return out;
}

Tensor Dropout::backward(const Tensor& dy) {
  if (!active_) return dy;
  Tensor dx = dy;
  for (int64_t i = 0; i < dx.numel(); ++i) dx[i] *= mask_[i];
  return dx;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, float eps, float momentum)
    : ch_(channels), eps_(eps), momentum_(momentum) {
  gamma_ = Tensor::full({channels}, 1.0f);
  beta_ = Tensor({channels});
  dgamma_ = Tensor({channels});
  dbeta_ = Tensor({channels});
  running_mean_ = Tensor({channels});
  running_var_ = Tensor::full({channels}, 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const int64_t n = b * hw;
  Tensor out(x.shape());
  if (mode != Mode::kTrain) {
    // Running statistics; kFrozenGrad additionally caches xhat/invstd so
    // backward can treat the layer as a fixed per-channel affine map.
    const bool keep = mode == Mode::kFrozenGrad;
    if (keep) {
      cached_mode_ = mode;
      cached_xhat_ = Tensor(x.shape());
      cached_invstd_.assign(size_t(c), 0.0);
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      const float m = running_mean_[ch];
      const float inv = 1.0f / std::sqrt(running_var_[ch] + eps_);
      const float g = gamma_[ch], bt = beta_[ch];
      if (keep) cached_invstd_[size_t(ch)] = inv;
      for (int64_t nn = 0; nn < b; ++nn) {
        const float* xp = x.data() + (nn * c + ch) * hw;
        float* op = out.data() + (nn * c + ch) * hw;
        float* xh = keep ? cached_xhat_.data() + (nn * c + ch) * hw : nullptr;
        for (int64_t i = 0; i < hw; ++i) {
          const float v = (xp[i] - m) * inv;
          if (keep) xh[i] = v;
          op[i] = v * g + bt;
        }
      }
    }
    return out;
  }
  cached_mode_ = mode;
  cached_xhat_ = Tensor(x.shape());
  cached_invstd_.assign(size_t(c), 0.0);
  for (int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (int64_t nn = 0; nn < b; ++nn) {
      const float* xp = x.data() + (nn * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        sum += xp[i];
        sq += double(xp[i]) * xp[i];
      }
    }
    const double mean = sum / double(n);
    const double var = sq / double(n) - mean * mean;  // biased
    const double invstd = 1.0 / std::sqrt(var + eps_);
    cached_invstd_[size_t(ch)] = invstd;
    const double unbiased = n > 1 ? var * double(n) / double(n - 1) : var;
    running_mean_[ch] = float((1.0 - momentum_) * running_mean_[ch] + momentum_ * mean);
    running_var_[ch] = float((1.0 - momentum_) * running_var_[ch] + momentum_ * unbiased);
    const float g = gamma_[ch], bt = beta_[ch];
    for (int64_t nn = 0; nn < b; ++nn) {
      const float* xp = x.data() + (nn * c + ch) * hw;
      float* xh = cached_xhat_.data() + (nn * c + ch) * hw;
      float* op = out.data() + (nn * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        const float v = float((xp[i] - mean) * invstd);
        xh[i] = v;
        op[i] = v * g + bt;
      }
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  const int64_t b = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  const int64_t n = b * hw;
  Tensor dx(dy.shape());
  if (cached_mode_ == Mode::kFrozenGrad) {
    for (int64_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      const float scale = float(double(gamma_[ch]) * cached_invstd_[size_t(ch)]);
      for (int64_t nn = 0; nn < b; ++nn) {
        const float* dyp = dy.data() + (nn * c + ch) * hw;
        const float* xh = cached_xhat_.data() + (nn * c + ch) * hw;
        float* dxp = dx.data() + (nn * c + ch) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          sum_dy += dyp[i];
          sum_dy_xh += double(dyp[i]) * xh[i];
          dxp[i] = dyp[i] * scale;
        }
      }
      dbeta_[ch] += float(sum_dy);
      dgamma_[ch] += float(sum_dy_xh);
    }
    return dx;
  }
  for (int64_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (int64_t nn = 0; nn < b; ++nn) {
      const float* dyp = dy.data() + (nn * c + ch) * hw;
      const float* xh = cached_xhat_.data() + (nn * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        sum_dy += dyp[i];
        sum_dy_xh += double(dyp[i]) * xh[i];
      }
    }
    dbeta_[ch] += float(sum_dy);
    dgamma_[ch] += float(sum_dy_xh);
    const double scale = double(gamma_[ch]) * cached_invstd_[size_t(ch)] / double(n);
    for (int64_t nn = 0; nn < b; ++nn) {
      const float* dyp = dy.data() + (nn * c + ch) * hw;
      const float* xh = cached_xhat_.data() + (nn * c + ch) * hw;
      float* dxp = dx.data() + (nn * c + ch) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        dxp[i] = float(scale * (double(n) * dyp[i] - sum_dy - double(xh[i]) * sum_dy_xh));
      }
    }
  }
  return dx;
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma_, &dgamma_});
  out.push_back({prefix + ".beta", &beta_, &dbeta_});
}

void BatchNorm2d::collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".running_mean", &running_mean_, nullptr});
  out.push_back({prefix + ".running_var", &running_var_, nullptr});
}

void BatchNorm2d::zero_grads() {
  dgamma_.fill(0.0f);
  dbeta_.fill(0.0f);
}

// ---------------------------------------------------------------- containers

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, mode);
  return h;
}

Tensor Sequential::backward(const Tensor& dy) {
  Tensor g = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  for (size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix.empty() ? names_[i] : prefix + "." + names_[i];
    layers_[i]->collect_params(p, out);
  }
}

void Sequential::collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) {
  for (size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix.empty() ? names_[i] : prefix + "." + names_[i];
    layers_[i]->collect_buffers(p, out);
  }
}

void Sequential::zero_grads() {
  for (auto& l : layers_) l->zero_grads();
}

Tensor Residual::forward(const Tensor& x, Mode mode) {
  Tensor m = main_->forward(x, mode);
  Tensor s = shortcut_ ? shortcut_->forward(x, mode) : x;
  CAMH_CHECK_ARG(m.same_shape(s), "residual: branch shape mismatch");
  Tensor out(m.shape());
  for (int64_t i = 0; i < m.numel(); ++i) {
    const float v = m[i] + s[i];
    out[i] = v > 0.0f ? v : 0.0f;
  }
  if (mode != Mode::kEval) cached_sum_ = out;  // relu output; >0 iff pre-activation >0
  return out;
}

Tensor Residual::backward(const Tensor& dy) {
  Tensor dsum = dy;
  for (int64_t i = 0; i < dsum.numel(); ++i) {
    if (cached_sum_[i] <= 0.0f) dsum[i] = 0.0f;
  }
  Tensor dx = main_->backward(dsum);
  if (shortcut_) {
    dx.add_scaled(shortcut_->backward(dsum), 1.0f);
  } else {
    dx.add_scaled(dsum, 1.0f);
  }
  return dx;
}

void Residual::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  main_->collect_params(prefix + ".main", out);
  if (shortcut_) shortcut_->collect_params(prefix + ".shortcut", out);
}

void Residual::collect_buffers(const std::string& prefix, std::vector<ParamRef>& out) {
  main_->collect_buffers(prefix + ".main", out);
  if (shortcut_) shortcut_->collect_buffers(prefix + ".shortcut", out);
}

void Residual::zero_grads() {
  main_->zero_grads();
  if (shortcut_) shortcut_->zero_grads();
}

// ---------------------------------------------------------------- loss

LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const int64_t b = logits.dim(0), c = logits.dim(1);
  CAMH_CHECK_ARG(int64_t(labels.size()) == b, "loss: label count mismatch");
  LossResult r;
  r.dlogits = Tensor(logits.shape());
  double total = 0.0;
  for (int64_t n = 0; n < b; ++n) {
    const float* row = logits.data() + n * c;
    float mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(double(row[j]) - mx);
    const int y = labels[size_t(n)];
    CAMH_CHECK_ARG(y >= 0 && y < c, "loss: label out of range");
    total += std::log(denom) - (double(row[y]) - mx);
    const double inv_b = 1.0 / double(b);
    for (int64_t j = 0; j < c; ++j) {
      const double p = std::exp(double(row[j]) - mx) / denom;
      r.dlogits.at2(n, j) = float((p - (j == y ? 1.0 : 0.0)) * inv_b);
    }
  }
  r.loss = total / double(b);
  return r;
}

double softmax_cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  const int64_t b = logits.dim(0), c = logits.dim(1);
  CAMH_CHECK_ARG(int64_t(labels.size()) == b, "loss: label count mismatch");
  double total = 0.0;
  for (int64_t n = 0; n < b; ++n) {
    const float* row = logits.data() + n * c;
    float mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(double(row[j]) - mx);
    const int y = labels[size_t(n)];
    CAMH_CHECK_ARG(y >= 0 && y < c, "loss: label out of range");
    total += std::log(denom) - (double(row[y]) - mx);
  }
  return total / double(b);
}

// ---------------------------------------------------------------- sgd

void Sgd::step(const std::vector<ParamRef>& params, float lr, float clip_norm) {
  if (velocity_.empty()) {
    velocity_.reserve(params.size());
    for (const auto& p : params) velocity_.emplace_back(p.value->shape());
  }
  CAMH_CHECK_ARG(velocity_.size() == params.size(), "sgd: parameter set changed");
  float scale = 1.0f;
  if (clip_norm > 0.0f) {
    double sq = 0.0;
    for (const auto& pr : params) sq += pr.grad->sq_sum();
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) scale = float(clip_norm / norm);
  }
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& v = velocity_[i];
    Tensor& p = *params[i].value;
    const Tensor& g = *params[i].grad;
    for (int64_t j = 0; j < p.numel(); ++j) {
      const float vj = momentum_ * v[j] + scale * g[j];
      v[j] = vj;
      p[j] -= lr * vj;
    }
  }
}

double params_checksum(const std::vector<ParamRef>& params) {
  // Order- and content-sensitive digest; used by no-mutation invariants.
  double acc = 0.0;
  uint64_t h = 1469598103934665603ULL;
  for (const auto& pr : params) {
    const Tensor& t = *pr.value;
    for (int64_t i = 0; i < t.numel(); ++i) {
      uint32_t bits;
      const float v = t[i];
      std::memcpy(&bits, &v, 4);
      h = (h ^ bits) * 1099511628211ULL;
    }
    acc += t.sum();
  }
  return acc + double(h % 1000003);
}

}  // namespace camh::nn
