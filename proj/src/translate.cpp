#include "smd/translate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "smd/error.hpp"

namespace smd::translate {
namespace {

constexpr std::size_t kChunk = 64;

torch::Tensor to_net_dtype(const nets::Networks& nets, const std::vector<ImageGrid>& images) {
  for (const auto& img : images) {
    if (img.height != nets.config.height || img.width != nets.config.width) {
      throw ValidationError("image size " + std::to_string(img.height) + "x" +
                            std::to_string(img.width) + " does not match the network resolution " +
                            std::to_string(nets.config.height) + "x" +
                            std::to_string(nets.config.width));
    }
  }
  const auto dtype = nets.decoder->parameters().front().scalar_type();
  return nets::images_to_tensor(images).to(dtype);
}

template <typename Fn>
void for_chunks(std::size_t n, Fn&& fn) {
  for (std::size_t lo = 0; lo < n; lo += kChunk) fn(lo, std::min(n, lo + kChunk));
}

std::vector<ImageGrid> slice(const std::vector<ImageGrid>& v, std::size_t lo, std::size_t hi) {
  return {v.begin() + static_cast<std::ptrdiff_t>(lo), v.begin() + static_cast<std::ptrdiff_t>(hi)};
}

}  // namespace

ContrastCode contrast_code(const nets::Networks& nets, const ImageGrid& image) {
  return mean_contrast_code(nets, {image});
}

ContrastCode mean_contrast_code(const nets::Networks& nets, const std::vector<ImageGrid>& images) {
  if (images.empty()) throw ValidationError("mean_contrast_code: no reference images");
  torch::NoGradGuard guard;
  auto sum = torch::zeros({nets::kContrastDim}, torch::kFloat64);
  for_chunks(images.size(), [&](std::size_t lo, std::size_t hi) {
    const auto c = nets::encode_contrast(nets, to_net_dtype(nets, slice(images, lo, hi)));
    sum += c.to(torch::kFloat64).sum(0);
  });
  sum /= static_cast<double>(images.size());
  return {static_cast<float>(sum[0].item<double>()), static_cast<float>(sum[1].item<double>())};
}

std::vector<ImageGrid> harmonize(const nets::Networks& nets, const TranslationJob& job) {
  const ContrastCode code = std::holds_alternative<ContrastCode>(job.target)
                                ? std::get<ContrastCode>(job.target)
                                : contrast_code(nets, std::get<ImageGrid>(job.target));
  torch::NoGradGuard guard;
  std::vector<ImageGrid> out;
  out.reserve(job.source_images.size());
  const auto mode = job.hard_anatomy ? nets::AnatomyMode::hard : nets::AnatomyMode::soft;
  for_chunks(job.source_images.size(), [&](std::size_t lo, std::size_t hi) {
    const auto x = to_net_dtype(nets, slice(job.source_images, lo, hi));
    const auto a = nets::encode_anatomy(nets, x, mode, 0.5);
    const auto c = torch::tensor({code[0], code[1]}, torch::kFloat32)
                       .to(x.scalar_type())
                       .unsqueeze(0)
                       .expand({x.size(0), nets::kContrastDim});
    for (auto& img : nets::tensor_to_images(nets::decode(nets, a, c))) out.push_back(std::move(img));
  });
  return out;
}

torch::Tensor anatomy_labels(const nets::Networks& nets, const std::vector<ImageGrid>& images) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> parts;
  for_chunks(images.size(), [&](std::size_t lo, std::size_t hi) {
    parts.push_back(nets::label_map(nets::anatomy_logits(nets, to_net_dtype(nets, slice(images, lo, hi)))));
  });
  return torch::cat(parts, 0);
}

double label_agreement(const nets::Networks& nets, const std::vector<ImageGrid>& a,
                       const std::vector<ImageGrid>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw ValidationError("label_agreement: image lists must be non-empty and of equal length");
  }
  const auto la = anatomy_labels(nets, a);
  const auto lb = anatomy_labels(nets, b);
  return la.eq(lb).to(torch::kFloat64).mean().item<double>();
}

QualityReport quality_report(const std::vector<ImageGrid>& outputs,
                             const std::vector<ImageGrid>& references, std::vector<std::string> ids) {
  if (outputs.size() != references.size()) {
    throw ValidationError("quality_report: output and reference counts differ");
  }
  if (ids.empty()) {
    for (std::size_t i = 0; i < outputs.size(); ++i) ids.push_back("img" + std::to_string(i));
  }
  if (ids.size() != outputs.size()) throw ValidationError("quality_report: id count differs");
  QualityReport r;
  r.ids = std::move(ids);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    r.ssim.push_back(ssim(outputs[i], references[i]));
    r.psnr.push_back(psnr(outputs[i], references[i]));
  }
  r.ssim_summary = summarize(r.ssim);
  r.psnr_summary = summarize(r.psnr);
  return r;
}

std::string format_quality_tsv(const QualityReport& r) {
  std::ostringstream out;
  char line[160];
  out << "# metrics computed per 2D image\n";
  out << "id\tssim\tpsnr_db\n";
  for (std::size_t i = 0; i < r.ids.size(); ++i) {
    std::snprintf(line, sizeof line, "%s\t%.6f\t%.4f\n", r.ids[i].c_str(), r.ssim[i], r.psnr[i]);
    out << line;
  }
  std::snprintf(line, sizeof line, "mean\t%.6f\t%.4f\n", r.ssim_summary.mean, r.psnr_summary.mean);
  out << line;
  std::snprintf(line, sizeof line, "std\t%.6f\t%.4f\n", r.ssim_summary.stddev, r.psnr_summary.stddev);
  out << line;
  return out.str();
}

// ---------------------------------------------------------------------------

std::vector<double> SiteClassifier::features(const ImageGrid& image) {
  // Histogram of the 3x3 median-filtered image. The filter removes most of the
  // acquisition noise, so real renders and decoder outputs (which come out
  // nearly noise-free) put their mass in the same bins. Linear interpolation
  // between bins keeps small intensity shifts smooth.
  const std::int64_t h = image.height, w = image.width;
  std::vector<double> hist(kFeatures, 0.0);
  std::array<float, 9> win{};
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      int n = 0;
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const auto yy = std::clamp(y + dy, std::int64_t{0}, h - 1);
          const auto xx = std::clamp(x + dx, std::int64_t{0}, w - 1);
          win[n++] = image.pixels[static_cast<std::size_t>(yy * w + xx)];
        }
      }
      std::nth_element(win.begin(), win.begin() + 4, win.end());
      const double pos = std::clamp(static_cast<double>(win[4]), 0.0, 1.0) * (kFeatures - 1);
      const int lo = std::min(static_cast<int>(pos), kFeatures - 2);
      const double frac = pos - lo;
      hist[lo] += 1.0 - frac;
      hist[lo + 1] += frac;
    }
  }
  for (auto& v : hist) v /= static_cast<double>(image.size());
  return hist;
}

torch::Tensor SiteClassifier::logits(const std::vector<ImageGrid>& images) const {
  std::vector<double> flat;
  flat.reserve(images.size() * kFeatures);
  for (const auto& img : images) {
    const auto f = features(img);
    flat.insert(flat.end(), f.begin(), f.end());
  }
  auto x = torch::tensor(flat, torch::kFloat64).view({static_cast<std::int64_t>(images.size()), kFeatures});
  x = (x - feature_mean_) / feature_scale_;
  return x.matmul(weight_) + bias_;
}

void SiteClassifier::fit(const std::vector<ImageGrid>& images, const std::vector<int>& sites, int epochs) {
  if (images.empty() || images.size() != sites.size()) {
    throw ValidationError("SiteClassifier: need one site label per image");
  }
  std::map<int, int> index;
  for (int s : sites) index.emplace(s, 0);
  if (index.size() < 2) throw ValidationError("SiteClassifier: need at least two sites");
  site_of_class_.clear();
  for (auto& [site, k] : index) {
    k = static_cast<int>(site_of_class_.size());
    site_of_class_.push_back(site);
  }
  num_sites_ = static_cast<int>(site_of_class_.size());

  std::vector<double> flat;
  std::vector<std::int64_t> labels;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto f = features(images[i]);
    flat.insert(flat.end(), f.begin(), f.end());
    labels.push_back(index.at(sites[i]));
  }
  const auto x = torch::tensor(flat, torch::kFloat64).view({static_cast<std::int64_t>(images.size()), kFeatures});
  const auto y = torch::tensor(labels, torch::kLong);
  feature_mean_ = x.mean(0);
  feature_scale_ = x.std(0).clamp_min(1e-6);

  weight_ = torch::zeros({kFeatures, num_sites_}, torch::kFloat64).requires_grad_(true);
  bias_ = torch::zeros({num_sites_}, torch::kFloat64).requires_grad_(true);
  const auto xs = (x - feature_mean_) / feature_scale_;
  torch::optim::Adam optim({weight_, bias_}, torch::optim::AdamOptions(0.05));
  for (int e = 0; e < epochs; ++e) {
    optim.zero_grad();
    auto loss = torch::nn::functional::cross_entropy(xs.matmul(weight_) + bias_, y) +
                1e-3 * weight_.pow(2).sum();
    loss.backward();
    optim.step();
  }
  weight_ = weight_.detach();
  bias_ = bias_.detach();
}

int SiteClassifier::predict(const ImageGrid& image) const {
  torch::NoGradGuard guard;
  if (num_sites_ == 0) throw ValidationError("SiteClassifier: not fitted");
  return site_of_class_[static_cast<std::size_t>(logits({image}).argmax(1).item<std::int64_t>())];
}

double SiteClassifier::accuracy(const std::vector<ImageGrid>& images, const std::vector<int>& sites) const {
  if (images.empty() || images.size() != sites.size()) {
    throw ValidationError("SiteClassifier: need one site label per image");
  }
  if (num_sites_ == 0) throw ValidationError("SiteClassifier: not fitted");
  torch::NoGradGuard guard;
  const auto pred = logits(images).argmax(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    hits += site_of_class_[static_cast<std::size_t>(pred[static_cast<std::int64_t>(i)].item<std::int64_t>())] == sites[i];
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

}  // namespace smd::translate
