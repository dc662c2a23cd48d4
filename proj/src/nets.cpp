#include "smd/nets.hpp"

#include <cmath>

#include "smd/config.hpp"
#include "smd/error.hpp"

namespace smd::nets {
namespace {

namespace F = torch::nn::functional;

thread_local ActivationTrace* active_trace = nullptr;

torch::Tensor leaky(const torch::Tensor& x, double slope) {
  if (active_trace != nullptr) active_trace->record(x > 0);
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(slope));
}

torch::Tensor max_pool(const torch::Tensor& x) {
  if (active_trace == nullptr) return torch::max_pool2d(x, 2);
  auto [out, idx] = torch::max_pool2d_with_indices(x, 2);
  active_trace->record(idx);
  return out;
}

void kaiming_init(torch::nn::Module& module, double slope) {
  torch::NoGradGuard guard;
  for (auto& m : module.modules(/*include_self=*/true)) {
    if (auto* conv = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::kaiming_normal_(conv->weight, slope, torch::kFanIn,
                                       torch::kLeakyReLU);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* up = m->as<torch::nn::ConvTranspose2d>()) {
      torch::nn::init::kaiming_normal_(up->weight, slope, torch::kFanIn, torch::kLeakyReLU);
      if (up->bias.defined()) up->bias.zero_();
    }
  }
}

std::string shape_str(const torch::Tensor& t) {
  std::string s = "[";
  for (std::int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += ", ";
    s += std::to_string(t.size(i));
  }
  return s + "]";
}

}  // namespace

void validate(const NetConfig& cfg) {
  if (cfg.height <= 0 || cfg.width <= 0 || cfg.height % 16 != 0 || cfg.width % 16 != 0) {
    throw ValidationError("network image size must be positive and divisible by 16, got " +
                          std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }
  if (cfg.anatomy_channels < 2) throw ValidationError("anatomy_channels must be >= 2");
  if (cfg.anatomy_width < 1 || cfg.decoder_width < 1 || cfg.contrast_width < 1 ||
      cfg.critic_width < 1) {
    throw ValidationError("network widths must be >= 1");
  }
}

DoubleConvImpl::DoubleConvImpl(std::int64_t in_ch, std::int64_t out_ch, double slope, bool normalize)
    : slope_(slope) {
  using namespace torch::nn;
  conv1_ = register_module("conv1", Conv2d(Conv2dOptions(in_ch, out_ch, 3).padding(1)));
  conv2_ = register_module("conv2", Conv2d(Conv2dOptions(out_ch, out_ch, 3).padding(1)));
  if (normalize) {
    norm1_ = register_module("norm1", InstanceNorm2d(InstanceNorm2dOptions(out_ch).affine(true)));
    norm2_ = register_module("norm2", InstanceNorm2d(InstanceNorm2dOptions(out_ch).affine(true)));
  }
}

torch::Tensor DoubleConvImpl::forward(torch::Tensor x) {
  x = conv1_(x);
  x = leaky(norm1_ ? norm1_(x) : x, slope_);
  x = conv2_(x);
  return leaky(norm2_ ? norm2_(x) : x, slope_);
}

UNetImpl::UNetImpl(std::int64_t in_ch, std::int64_t out_ch, int levels, std::int64_t width,
                   double slope, bool normalize)
    : levels_(levels) {
  using namespace torch::nn;
  std::vector<std::int64_t> widths;
  for (int i = 0; i <= levels; ++i) widths.push_back(width * (std::int64_t{1} << std::min(i, 3)));

  std::int64_t ch = in_ch;
  for (int i = 0; i < levels; ++i) {
    down_->push_back(DoubleConv(ch, widths[i], slope, normalize));
    ch = widths[i];
  }
  bottom_ = register_module("bottom", DoubleConv(ch, widths[levels], slope, normalize));
  for (int i = levels - 1; i >= 0; --i) {
    up_->push_back(ConvTranspose2d(ConvTranspose2dOptions(widths[i + 1], widths[i], 2).stride(2)));
    merge_->push_back(DoubleConv(2 * widths[i], widths[i], slope, normalize));
  }
  register_module("down", down_);
  register_module("up", up_);
  register_module("merge", merge_);
  head_ = register_module("head", Conv2d(Conv2dOptions(widths[0], out_ch, 1)));
}

torch::Tensor UNetImpl::forward(torch::Tensor x) {
  std::vector<torch::Tensor> skips;
  for (const auto& block : *down_) {
    x = block->as<DoubleConvImpl>()->forward(x);
    skips.push_back(x);
    x = max_pool(x);
  }
  x = bottom_(x);
  for (std::size_t i = 0; i < up_->size(); ++i) {
    x = up_[i]->as<torch::nn::ConvTranspose2dImpl>()->forward(x);
    x = torch::cat({x, skips[skips.size() - 1 - i]}, 1);
    x = merge_[i]->as<DoubleConvImpl>()->forward(x);
  }
  return head_(x);
}

ContrastEncoderImpl::ContrastEncoderImpl(const NetConfig& cfg) : slope_(cfg.leaky_slope) {
  using namespace torch::nn;
  std::int64_t ch = 1;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t out = cfg.contrast_width << i;
    convs_->push_back(Conv2d(Conv2dOptions(ch, out, 4).stride(2).padding(1)));
    ch = out;
  }
  register_module("convs", convs_);
  head_ = register_module(
      "head", Conv2d(Conv2dOptions(ch, kContrastDim, {cfg.height / 16, cfg.width / 16})));
}

torch::Tensor ContrastEncoderImpl::forward(torch::Tensor x) {
  for (const auto& conv : *convs_) x = leaky(conv->as<torch::nn::Conv2dImpl>()->forward(x), slope_);
  return head_(x).flatten(1);
}

CriticImpl::CriticImpl(std::int64_t in_ch, std::int64_t width, double slope) : slope_(slope) {
  using namespace torch::nn;
  std::int64_t ch = in_ch;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t out = width << i;
    convs_->push_back(Conv2d(Conv2dOptions(ch, out, 4).stride(2).padding(1)));
    ch = out;
  }
  register_module("convs", convs_);
  score_ = register_module("score", Linear(ch, 1));
}

torch::Tensor CriticImpl::forward(torch::Tensor x) {
  for (const auto& conv : *convs_) x = leaky(conv->as<torch::nn::Conv2dImpl>()->forward(x), slope_);
  return score_(x.mean({2, 3})).squeeze(1);
}

Networks Networks::create(const NetConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  torch::manual_seed(seed);
  const double s = cfg.leaky_slope;
  Networks n;
  n.config = cfg;
  n.anatomy = UNet(1, cfg.anatomy_channels, 3, cfg.anatomy_width, s);
  n.contrast = ContrastEncoder(cfg);
  // No instance norm in D: c enters as constant channels, and normalizing
  // conv(a, c) per channel subtracts exactly the part contributed by c.
  n.decoder = UNet(cfg.anatomy_channels + kContrastDim, 1, 4, cfg.decoder_width, s, false);
  n.infomax_critic = Critic(1 + kContrastDim, cfg.critic_width, s);
  n.discriminator = Critic(cfg.anatomy_channels + kContrastDim, cfg.critic_width, s);

  kaiming_init(*n.anatomy, s);
  kaiming_init(*n.contrast, s);
  kaiming_init(*n.decoder, s);
  kaiming_init(*n.infomax_critic, s);
  kaiming_init(*n.discriminator, s);
  {
    torch::NoGradGuard guard;
    for (auto& p : n.infomax_critic->named_children()["score"]->parameters()) p.zero_();
    for (auto& p : n.discriminator->named_children()["score"]->parameters()) p.zero_();
  }
  return n;
}

std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> Networks::groups() const {
  return {{"anatomy", anatomy.ptr()},
          {"contrast", contrast.ptr()},
          {"decoder", decoder.ptr()},
          {"critic_t", infomax_critic.ptr()},
          {"disc_u", discriminator.ptr()}};
}

void Networks::to(torch::Dtype dtype) {
  anatomy->to(dtype);
  contrast->to(dtype);
  decoder->to(dtype);
  infomax_critic->to(dtype);
  discriminator->to(dtype);
}

Networks Networks::clone() const {
  // Rebuild the architecture, then copy values; the seed is irrelevant.
  Networks n = create(config, 0);
  const auto dtype = anatomy->parameters().front().scalar_type();
  n.to(dtype);
  torch::NoGradGuard guard;
  const auto src = groups();
  const auto dst = n.groups();
  for (std::size_t g = 0; g < src.size(); ++g) {
    auto sp = src[g].second->parameters();
    auto dp = dst[g].second->parameters();
    for (std::size_t i = 0; i < sp.size(); ++i) dp[i].copy_(sp[i]);
    auto sb = src[g].second->buffers();
    auto db = dst[g].second->buffers();
    for (std::size_t i = 0; i < sb.size(); ++i) db[i].copy_(sb[i]);
  }
  return n;
}

void check_image_batch(const torch::Tensor& x, const char* what) {
  if (x.dim() != 4 || x.size(1) != 1) {
    throw ValidationError(std::string(what) + ": expected an image batch [N, 1, H, W], got " +
                          shape_str(x));
  }
}

torch::Tensor anatomy_logits(const Networks& nets, const torch::Tensor& x) {
  check_image_batch(x, "encode_anatomy");
  if (x.size(2) % 8 != 0 || x.size(3) % 8 != 0) {
    throw ValidationError("encode_anatomy: height and width must be divisible by 8, got " +
                          std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)));
  }
  return nets.anatomy.ptr()->forward(x);
}

torch::Tensor anatomy_from_logits(const torch::Tensor& logits, AnatomyMode mode,
                                  double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("anatomy temperature must be > 0");
  const auto m = logits.size(1);
  if (mode == AnatomyMode::hard) {
    torch::NoGradGuard guard;
    return F::one_hot(logits.argmax(1), m).permute({0, 3, 1, 2}).to(logits.scalar_type());
  }
  auto soft = torch::softmax(logits / temperature, 1);
  if (mode == AnatomyMode::soft) return soft;
  auto hard = F::one_hot(logits.argmax(1), m).permute({0, 3, 1, 2}).to(logits.scalar_type());
  return hard + soft - soft.detach();
}

torch::Tensor encode_anatomy(const Networks& nets, const torch::Tensor& x, AnatomyMode mode,
                             double temperature) {
  return anatomy_from_logits(anatomy_logits(nets, x), mode, temperature);
}

torch::Tensor encode_contrast(const Networks& nets, const torch::Tensor& x) {
  check_image_batch(x, "encode_contrast");
  if (x.size(2) != nets.config.height || x.size(3) != nets.config.width) {
    throw ValidationError("encode_contrast: expected input size " +
                          std::to_string(nets.config.height) + "x" +
                          std::to_string(nets.config.width) + ", got " +
                          std::to_string(x.size(2)) + "x" + std::to_string(x.size(3)));
  }
  return nets.contrast.ptr()->forward(x);
}

torch::Tensor broadcast_concat(const torch::Tensor& features, const torch::Tensor& c) {
  if (c.dim() != 2 || c.size(1) != kContrastDim || c.size(0) != features.size(0)) {
    throw ValidationError("contrast code must be [N, 2] matching the batch, got " + shape_str(c));
  }
  auto tiled = c.view({c.size(0), kContrastDim, 1, 1})
                   .expand({c.size(0), kContrastDim, features.size(2), features.size(3)});
  return torch::cat({features, tiled}, 1);
}

torch::Tensor decode(const Networks& nets, const torch::Tensor& a, const torch::Tensor& c) {
  if (a.dim() != 4 || a.size(1) != nets.config.anatomy_channels) {
    throw ValidationError("decode: anatomy code must have " +
                          std::to_string(nets.config.anatomy_channels) + " channels, got " +
                          shape_str(a));
  }
  if (a.size(2) % 16 != 0 || a.size(3) % 16 != 0) {
    throw ValidationError("decode: height and width must be divisible by 16");
  }
  return torch::sigmoid(nets.decoder.ptr()->forward(broadcast_concat(a, c)));
}

torch::Tensor critic_t(const Networks& nets, const torch::Tensor& c, const torch::Tensor& x) {
  check_image_batch(x, "critic_t");
  return nets.infomax_critic.ptr()->forward(broadcast_concat(x, c));
}

torch::Tensor discriminator_u_logits(const Networks& nets, const torch::Tensor& a,
                                     const torch::Tensor& c) {
  if (a.dim() != 4 || a.size(1) != nets.config.anatomy_channels) {
    throw ValidationError("discriminator_u: anatomy code must have " +
                          std::to_string(nets.config.anatomy_channels) + " channels, got " +
                          shape_str(a));
  }
  return nets.discriminator.ptr()->forward(broadcast_concat(a, c));
}

torch::Tensor discriminator_u(const Networks& nets, const torch::Tensor& a, const torch::Tensor& c) {
  // sigmoid rounds to exactly 0 or 1 in float32 beyond |logit| ~ 17; the
  // clamp keeps the probability strictly inside (0, 1). Losses use the logits.
  return torch::sigmoid(discriminator_u_logits(nets, a, c).clamp(-15.0, 15.0));
}

torch::Tensor label_map(const torch::Tensor& a) { return a.argmax(1); }

torch::Tensor anatomy_summary(const torch::Tensor& a) { return a.mean({2, 3}); }

torch::Tensor images_to_tensor(const std::vector<ImageGrid>& images) {
  if (images.empty()) throw ValidationError("empty image batch");
  const int h = images.front().height;
  const int w = images.front().width;
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), 1, h, w}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (const auto& img : images) {
    if (img.height != h || img.width != w) throw ValidationError("image batch has mixed sizes");
    std::copy(img.pixels.begin(), img.pixels.end(), dst);
    dst += img.pixels.size();
  }
  return out;
}

std::vector<ImageGrid> tensor_to_images(const torch::Tensor& t) {
  check_image_batch(t, "tensor_to_images");
  auto c = t.detach().to(torch::kFloat32).contiguous();
  const auto n = c.size(0);
  const int h = static_cast<int>(c.size(2));
  const int w = static_cast<int>(c.size(3));
  std::vector<ImageGrid> out;
  const float* src = c.data_ptr<float>();
  for (std::int64_t i = 0; i < n; ++i) {
    ImageGrid g(h, w);
    std::copy(src, src + g.pixels.size(), g.pixels.begin());
    src += g.pixels.size();
    out.push_back(std::move(g));
  }
  return out;
}

ActivationTrace::ActivationTrace() {
  if (active_trace != nullptr) throw std::logic_error("ActivationTrace is not reentrant");
  active_trace = this;
}

ActivationTrace::~ActivationTrace() { active_trace = nullptr; }

void ActivationTrace::record(const torch::Tensor& branch) {
  const auto bytes = branch.detach().to(torch::kCPU).to(torch::kInt64).contiguous();
  signature_ = fnv1a64(bytes.data_ptr(), static_cast<std::size_t>(bytes.numel()) * sizeof(std::int64_t),
                       signature_);
}

std::uint64_t checksum(const torch::nn::Module& module) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto hash_tensor = [&h](const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    h = fnv1a64(c.data_ptr<float>(), static_cast<std::size_t>(c.numel()) * sizeof(float), h);
  };
  for (const auto& p : module.parameters()) hash_tensor(p);
  for (const auto& b : module.buffers()) hash_tensor(b);
  return h;
}

std::uint64_t checksum(const Networks& nets) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, module] : nets.groups()) {
    const std::uint64_t g = checksum(*module);
    h = fnv1a64(&g, sizeof g, h);
  }
  return h;
}

}  // namespace smd::nets
