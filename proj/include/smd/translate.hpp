#pragma once

#include <torch/torch.h>

#include <array>
#include <string>
#include <variant>
#include <vector>

#include "smd/image.hpp"
#include "smd/image_metrics.hpp"
#include "smd/nets.hpp"

// Harmonization by recombination: x_hat = D(E_A(x_src), c_target).
namespace smd::translate {

using ContrastCode = std::array<float, 2>;

struct TranslationJob {
  std::vector<ImageGrid> source_images;
  // A reference image whose contrast code is borrowed, or an explicit code.
  std::variant<ImageGrid, ContrastCode> target;
  bool hard_anatomy = true;
};

ContrastCode contrast_code(const nets::Networks& nets, const ImageGrid& image);
// Mean of E_C over a set of images from one site.
ContrastCode mean_contrast_code(const nets::Networks& nets, const std::vector<ImageGrid>& images);

// Throws ValidationError when an image does not match the network resolution.
std::vector<ImageGrid> harmonize(const nets::Networks& nets, const TranslationJob& job);

// Hard anatomy labels of each image, [N, H, W].
torch::Tensor anatomy_labels(const nets::Networks& nets, const std::vector<ImageGrid>& images);
// Fraction of pixels whose anatomy label agrees between paired images.
double label_agreement(const nets::Networks& nets, const std::vector<ImageGrid>& a,
                       const std::vector<ImageGrid>& b);

struct QualityReport {
  std::vector<std::string> ids;
  std::vector<double> ssim;
  std::vector<double> psnr;
  Summary ssim_summary;
  Summary psnr_summary;
};

// Per-image 2D SSIM and PSNR of outputs against references.
QualityReport quality_report(const std::vector<ImageGrid>& outputs,
                             const std::vector<ImageGrid>& references,
                             std::vector<std::string> ids = {});
// id, ssim, psnr_db rows followed by mean and std rows; tab separated.
std::string format_quality_tsv(const QualityReport& report);

// Multinomial logistic regression on intensity histograms of median-filtered
// images. Used to check that
// translated images carry the target site's contrast.
class SiteClassifier {
 public:
  static constexpr int kFeatures = 32;

  // Full-batch Adam from zero weights, so the fit is deterministic.
  void fit(const std::vector<ImageGrid>& images, const std::vector<int>& sites, int epochs = 500);
  [[nodiscard]] int predict(const ImageGrid& image) const;
  [[nodiscard]] double accuracy(const std::vector<ImageGrid>& images, const std::vector<int>& sites) const;
  [[nodiscard]] int num_sites() const { return num_sites_; }

  static std::vector<double> features(const ImageGrid& image);

 private:
  int num_sites_ = 0;
  std::vector<int> site_of_class_;
  torch::Tensor feature_mean_, feature_scale_;
  torch::Tensor weight_;  // [kFeatures, classes]
  torch::Tensor bias_;
  [[nodiscard]] torch::Tensor logits(const std::vector<ImageGrid>& images) const;
};

}  // namespace smd::translate
