#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "smd/image.hpp"

// The five networks: anatomy encoder, contrast encoder, decoder, infomax
// critic T(c, x) and distribution discriminator U(a, c).
//
// Tensors are NCHW. Images are [N, 1, H, W], anatomy codes [N, M, H, W],
// contrast codes [N, 2].
namespace smd::nets {

inline constexpr std::int64_t kContrastDim = 2;

struct NetConfig {
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::int64_t anatomy_channels = 8;  // M
  std::int64_t anatomy_width = 16;    // base feature width of the anatomy U-Net
  std::int64_t decoder_width = 16;
  std::int64_t contrast_width = 16;
  std::int64_t critic_width = 16;  // shared by T and U
  double leaky_slope = 0.2;
};

void validate(const NetConfig& cfg);

enum class AnatomyMode {
  soft,              // softmax(logits / temperature)
  hard,              // exact one-hot argmax, no gradient
  straight_through,  // one-hot forward, softmax gradient backward
};

// conv3x3 -> InstanceNorm -> LeakyReLU, twice. Without `normalize` the norm
// layers are left out.
class DoubleConvImpl : public torch::nn::Module {
 public:
  DoubleConvImpl(std::int64_t in_ch, std::int64_t out_ch, double slope, bool normalize = true);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::InstanceNorm2d norm1_{nullptr}, norm2_{nullptr};
  double slope_;
};
TORCH_MODULE(DoubleConv);

// U-Net with `levels` 2x downsamplings (max pooling), stride-2 transposed
// convolutions on the way up and skip connections by concatenation.
class UNetImpl : public torch::nn::Module {
 public:
  UNetImpl(std::int64_t in_ch, std::int64_t out_ch, int levels, std::int64_t width, double slope,
           bool normalize = true);
  torch::Tensor forward(torch::Tensor x);
  [[nodiscard]] int levels() const { return levels_; }

 private:
  int levels_;
  torch::nn::ModuleList down_, up_, merge_;
  DoubleConv bottom_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(UNet);

// Four 4x4 stride-2 convolutions and a final convolution whose kernel covers
// the remaining spatial extent, giving a 2-vector.
class ContrastEncoderImpl : public torch::nn::Module {
 public:
  ContrastEncoderImpl(const NetConfig& cfg);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::ModuleList convs_;
  torch::nn::Conv2d head_{nullptr};
  double slope_;
};
TORCH_MODULE(ContrastEncoder);

// Four 4x4 stride-2 convolutions without normalisation, global average
// pooling and a zero-initialised linear score.
class CriticImpl : public torch::nn::Module {
 public:
  CriticImpl(std::int64_t in_ch, std::int64_t width, double slope);
  torch::Tensor forward(torch::Tensor x);  // [N]

 private:
  torch::nn::ModuleList convs_;
  torch::nn::Linear score_{nullptr};
  double slope_;
};
TORCH_MODULE(Critic);

struct Networks {
  NetConfig config;
  UNet anatomy{nullptr};
  ContrastEncoder contrast{nullptr};
  UNet decoder{nullptr};
  Critic infomax_critic{nullptr};  // T
  Critic discriminator{nullptr};   // U

  // Deterministic for a given seed (seeds torch's global generator).
  static Networks create(const NetConfig& cfg, std::uint64_t seed);

  // (group name, module) in a fixed order: anatomy, contrast, decoder,
  // critic_t, disc_u.
  [[nodiscard]] std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> groups() const;

  void to(torch::Dtype dtype);
  // Deep copy with independent parameters.
  [[nodiscard]] Networks clone() const;
};

void check_image_batch(const torch::Tensor& x, const char* what);

torch::Tensor anatomy_logits(const Networks& nets, const torch::Tensor& x);
torch::Tensor anatomy_from_logits(const torch::Tensor& logits, AnatomyMode mode, double temperature);
torch::Tensor encode_anatomy(const Networks& nets, const torch::Tensor& x, AnatomyMode mode,
                             double temperature);
torch::Tensor encode_contrast(const Networks& nets, const torch::Tensor& x);
torch::Tensor decode(const Networks& nets, const torch::Tensor& a, const torch::Tensor& c);
torch::Tensor critic_t(const Networks& nets, const torch::Tensor& c, const torch::Tensor& x);
torch::Tensor discriminator_u_logits(const Networks& nets, const torch::Tensor& a,
                                     const torch::Tensor& c);
torch::Tensor discriminator_u(const Networks& nets, const torch::Tensor& a, const torch::Tensor& c);

// [N, C, H, W] ++ c broadcast to [N, 2, H, W].
torch::Tensor broadcast_concat(const torch::Tensor& features, const torch::Tensor& c);

// Per-pixel argmax labels [N, H, W] of an anatomy code.
torch::Tensor label_map(const torch::Tensor& a);

// Channel-wise spatial mean [N, M].
torch::Tensor anatomy_summary(const torch::Tensor& a);

torch::Tensor images_to_tensor(const std::vector<ImageGrid>& images);
std::vector<ImageGrid> tensor_to_images(const torch::Tensor& t);

// While alive, records which linear piece every LeakyReLU and max-pool took on
// this thread. Two forward passes with equal signatures lie on the same smooth
// piece of the network; gradient checks use this to find stencils that straddle
// a kink. Not reentrant.
class ActivationTrace {
 public:
  ActivationTrace();
  ~ActivationTrace();
  ActivationTrace(const ActivationTrace&) = delete;
  ActivationTrace& operator=(const ActivationTrace&) = delete;

  void record(const torch::Tensor& branch);
  void reset() { signature_ = kEmpty; }
  [[nodiscard]] std::uint64_t signature() const { return signature_; }

 private:
  static constexpr std::uint64_t kEmpty = 0xcbf29ce484222325ULL;
  std::uint64_t signature_ = kEmpty;
};

// FNV-1a over the float32 bytes of every parameter and buffer, in order.
std::uint64_t checksum(const torch::nn::Module& module);
std::uint64_t checksum(const Networks& nets);

}  // namespace smd::nets
