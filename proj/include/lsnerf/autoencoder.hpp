#pragma once

// Residual convolutional autoencoder with an 8x spatial bottleneck.
//
// Encoder:  C5, RBIN, HD, RBIN, HD, RBIN, HD, RBIN, C1
// Decoder:  C1, RBIN, HU, RBIN, HU, RBIN, HU, RBIN, C1, sigmoid
//
// C5/C1 are 5x5/1x1 convolutions, RBIN is two residual blocks built from
// 3x3 convolutions with instance normalization and ELU, HD/HU are bilinear
// halving/doubling resamplers. Width changes happen in the first residual
// block of an RBIN, with a 1x1 projection on the skip path. All convolutions
// are same-padded, so only HD/HU change resolution. Residual blocks keep a
// clean additive skip (no post-skip activation): zeroing a block's
// convolutions makes it exactly the identity.

#include <string>
#include <vector>

#include "lsnerf/adam.hpp"
#include "lsnerf/image.hpp"
#include "lsnerf/ops.hpp"
#include "lsnerf/rng.hpp"
#include "lsnerf/tensor.hpp"

namespace lsnerf {

struct AEConfig {
  int latent_channels = 32;  // n
  // Output widths of [C5, RBIN, RBIN, RBIN, RBIN] in the encoder and of
  // [C1, RBIN, RBIN, RBIN, RBIN] in the decoder.
  std::array<int, 5> encoder_widths{32, 128, 128, 256, 256};
  std::array<int, 5> decoder_widths{256, 256, 128, 128, 32};
  float norm_eps = 1e-5f;
};

namespace detail {

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out], used only where no norm follows

  static ConvLayer init(ParamSet<T>& ps, const std::string& name, int in, int out,
                        int k, Pcg32& rng, bool with_bias) {
    const double s = std::sqrt(6.0 / (in * k * k));
    std::vector<T> w(static_cast<int64_t>(out) * in * k * k);
    for (auto& v : w) v = static_cast<T>((rng.next_double() * 2 - 1) * s);
    ConvLayer l;
    l.weight = ps.add(name + ".weight", Tensor<T>::param({out, in, k, k}, std::move(w)));
    if (with_bias)
      l.bias = ps.add(name + ".bias", Tensor<T>::param({out}, std::vector<T>(out, T(0))));
    return l;
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    const int k = weight.dim(2);
    Tensor<T> y = conv2d(x, weight, 1, k / 2);
    if (bias.defined()) y = add_channel_bias(y, bias);
    return y;
  }
};

template <typename T>
struct NormLayer {
  Tensor<T> scale, shift;
  float eps = 1e-5f;

  static NormLayer init(ParamSet<T>& ps, const std::string& name, int c, float eps) {
    NormLayer n;
    n.scale = ps.add(name + ".scale", Tensor<T>::param({c}, std::vector<T>(c, T(1))));
    n.shift = ps.add(name + ".shift", Tensor<T>::param({c}, std::vector<T>(c, T(0))));
    n.eps = eps;
    return n;
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    return instance_norm(x, scale, shift, static_cast<T>(eps));
  }
};

// conv3x3 -> norm -> ELU -> conv3x3 -> norm, additive skip (1x1-projected
// when the width changes).
template <typename T>
struct ResidualBlock {
  ConvLayer<T> conv1, conv2, proj;
  NormLayer<T> norm1, norm2;
  bool has_proj = false;

  static ResidualBlock init(ParamSet<T>& ps, const std::string& name, int in, int out,
                            Pcg32& rng, float eps) {
    ResidualBlock b;
    b.conv1 = ConvLayer<T>::init(ps, name + ".conv1", in, out, 3, rng, false);
    b.norm1 = NormLayer<T>::init(ps, name + ".norm1", out, eps);
    b.conv2 = ConvLayer<T>::init(ps, name + ".conv2", out, out, 3, rng, false);
    b.norm2 = NormLayer<T>::init(ps, name + ".norm2", out, eps);
    if (in != out) {
      b.proj = ConvLayer<T>::init(ps, name + ".proj", in, out, 1, rng, false);
      b.has_proj = true;
    }
    return b;
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> h = norm2(conv2(elu(norm1(conv1(x)))));
    Tensor<T> skip = has_proj ? proj(x) : x;
    return add(skip, h);
  }
};

}  // namespace detail

template <typename T>
class Autoencoder {
 public:
  Autoencoder() = default;
  Autoencoder(AEConfig cfg, uint64_t seed) : cfg_(cfg) { init_params(seed); }

  const AEConfig& config() const { return cfg_; }
  ParamSet<T>& encoder_params() { return enc_params_; }
  ParamSet<T>& decoder_params() { return dec_params_; }
  const ParamSet<T>& encoder_params() const { return enc_params_; }
  const ParamSet<T>& decoder_params() const { return dec_params_; }

  // Image [3,H,W] in [0,1] -> latent map [n, H/8, W/8].
  Tensor<T> encode(const Tensor<T>& image) const {
    check_rgb(image);
    if (image.dim(1) % 8 || image.dim(2) % 8)
      throw std::invalid_argument("encode: spatial size must be a multiple of 8");
    Tensor<T> h = elu(enc_in_norm_(enc_in_(image)));
    for (int i = 0; i < 4; ++i) {
      h = enc_blocks_[2 * i](h);
      h = enc_blocks_[2 * i + 1](h);
      if (i < 3) h = bilinear_resize(h, 0.5);
    }
    return enc_out_(h);
  }

  // Latent map [n,h,w] -> image [3, 8h, 8w] in [0,1].
  Tensor<T> decode(const Tensor<T>& latent) const {
    if (latent.shape().size() != 3 || latent.dim(0) != cfg_.latent_channels)
      throw std::invalid_argument("decode: expected [n,h,w] latent map");
    Tensor<T> h = dec_in_(latent);
    for (int i = 0; i < 4; ++i) {
      h = dec_blocks_[2 * i](h);
      h = dec_blocks_[2 * i + 1](h);
      if (i < 3) h = bilinear_resize(h, 2.0);
    }
    return sigmoid(dec_out_(h));
  }

  Tensor<T> reconstruct(const Tensor<T>& image) const { return decode(encode(image)); }

  int latent_channels() const { return cfg_.latent_channels; }

  // Inference helpers on plain containers.
  Image decode_image(const LatentImage& li) const {
    NoGradGuard ng;
    std::vector<T> v(li.values.begin(), li.values.end());
    auto out = decode(Tensor<T>::from({li.channels, li.height, li.width}, std::move(v)));
    Image img(li.width * 8, li.height * 8, 3);
    for (size_t i = 0; i < img.data.size(); ++i)
      img.data[i] = static_cast<float>(out.data()[i]);
    return img;
  }

 private:
  static void check_rgb(const Tensor<T>& image) {
    if (image.shape().size() != 3 || image.dim(0) != 3)
      throw std::invalid_argument("autoencoder: expected a [3,H,W] image");
  }

  void init_params(uint64_t seed) {
    Pcg32 erng(seed, 0xae5e6e63);
    const auto& ew = cfg_.encoder_widths;
    enc_in_ = detail::ConvLayer<T>::init(enc_params_, "enc.in", 3, ew[0], 5, erng, false);
    enc_in_norm_ = detail::NormLayer<T>::init(enc_params_, "enc.in_norm", ew[0], cfg_.norm_eps);
    int c = ew[0];
    for (int i = 0; i < 4; ++i) {
      const int out = ew[i + 1];
      enc_blocks_.push_back(detail::ResidualBlock<T>::init(
          enc_params_, "enc.rbin" + std::to_string(i) + "a", c, out, erng, cfg_.norm_eps));
      enc_blocks_.push_back(detail::ResidualBlock<T>::init(
          enc_params_, "enc.rbin" + std::to_string(i) + "b", out, out, erng, cfg_.norm_eps));
      c = out;
    }
    enc_out_ = detail::ConvLayer<T>::init(enc_params_, "enc.out", c, cfg_.latent_channels,
                                          1, erng, true);

    Pcg32 drng(seed, 0xae5e6e64);
    const auto& dw = cfg_.decoder_widths;
    dec_in_ = detail::ConvLayer<T>::init(dec_params_, "dec.in", cfg_.latent_channels,
                                         dw[0], 1, drng, true);
    c = dw[0];
    for (int i = 0; i < 4; ++i) {
      const int out = dw[i + 1];
      dec_blocks_.push_back(detail::ResidualBlock<T>::init(
          dec_params_, "dec.rbin" + std::to_string(i) + "a", c, out, drng, cfg_.norm_eps));
      dec_blocks_.push_back(detail::ResidualBlock<T>::init(
          dec_params_, "dec.rbin" + std::to_string(i) + "b", out, out, drng, cfg_.norm_eps));
      c = out;
    }
    dec_out_ = detail::ConvLayer<T>::init(dec_params_, "dec.out", c, 3, 1, drng, true);
  }

  AEConfig cfg_;
  ParamSet<T> enc_params_, dec_params_;
  detail::ConvLayer<T> enc_in_, enc_out_, dec_in_, dec_out_;
  detail::NormLayer<T> enc_in_norm_;
  std::vector<detail::ResidualBlock<T>> enc_blocks_, dec_blocks_;
};

// Image <-> tensor bridges.
template <typename T>
Tensor<T> image_tensor(const Image& img) {
  std::vector<T> v(img.data.begin(), img.data.end());
  return Tensor<T>::from({img.channels, img.height, img.width}, std::move(v));
}

template <typename T>
Image tensor_image(const Tensor<T>& t) {
  Image img(t.dim(2), t.dim(1), t.dim(0));
  for (size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<float>(t.data()[i]);
  return img;
}

}  // namespace lsnerf
