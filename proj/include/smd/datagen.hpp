#pragma once

#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smd/image.hpp"

// Synthetic multi-site phantoms with known anatomy (tissue label map) and
// contrast (site transfer function) factors.
namespace smd::datagen {

struct Ellipse {
  double center_y = 0.0;
  double center_x = 0.0;
  double axis_a = 1.0;  // semi-axis along the rotated x direction, pixels
  double axis_b = 1.0;  // semi-axis along the rotated y direction, pixels
  double rotation_rad = 0.0;
  int tissue_class = 1;

  bool operator==(const Ellipse&) const = default;
};

// Anatomy of one subject. Shapes are painted in order; later shapes overwrite
// earlier ones. Pixels outside every shape belong to class 0 (background).
struct PhantomSpec {
  std::vector<Ellipse> shapes;
  int height = 32;
  int width = 32;
  int num_views = 2;
  int num_classes = 4;
  // View v is the shape set rotated by v * view_rotation_rad about the grid
  // centre and mirrored left-right when v is odd.
  double view_rotation_rad = std::numbers::pi / 2.0;

  bool operator==(const PhantomSpec&) const = default;
};

// Contrast of one acquisition site.
struct SiteParams {
  int site_id = 0;
  std::vector<double> tissue_intensity;  // one entry per tissue class, in [0, 1]
  double gamma = 1.0;
  double bias_amplitude = 0.0;
  double noise_sigma = 0.0;
};

struct PhantomOptions {
  int height = 32;
  int width = 32;
  int num_classes = 4;
  int min_shapes = 3;
  int max_shapes = 8;
  int num_views = 2;
  double view_rotation_rad = std::numbers::pi / 2.0;
};

// Deterministic seed mixing (splitmix64 finaliser).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

PhantomSpec generate_phantom(const PhantomOptions& opts, std::uint64_t seed);

void validate(const PhantomSpec& spec);
void validate(const SiteParams& site, int num_classes);
// Distinct site ids must have tissue_intensity vectors at least 0.05 apart in
// the max norm.
void validate_site_separation(std::span<const SiteParams> sites);

// Tissue class of every pixel for the given view, row-major.
std::vector<int> label_map(const PhantomSpec& spec, int view_index);

// Multiplicative field with mean 1. It is a polynomial in (u^2 + v^2) and
// u^2 v^2 over normalised coordinates, so quarter-turn rotations and mirrors
// of a square grid leave it unchanged.
std::vector<double> bias_field(const SiteParams& site, int height, int width);

ImageGrid render_phantom(const PhantomSpec& spec, const SiteParams& site, int view_index,
                         std::uint64_t rng_seed);

// Four well-separated sites with K = 4 (background intensity 0). All four
// keep the same tissue ordering, like scanners of one modality; levels and
// gamma differ. With permuted orderings the two inner classes, which have the
// same shape statistics, could not be matched across sites without pairs.
std::vector<SiteParams> standard_sites(double bias_amplitude = 0.1, double noise_sigma = 0.01);

// ---------------------------------------------------------------------------
// Datasets

struct ManifestRecord {
  std::string sample_id;
  std::string subject_id;
  int site_id = 0;
  int view_index = 0;
  std::string file_path;  // relative to the dataset directory
  int height = 0;
  int width = 0;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  int format_version = 1;

  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<ImageGrid> grids;  // parallel to manifest.records

  bool operator==(const Dataset&) const = default;
};

struct DatasetOptions {
  PhantomOptions phantom;
  std::vector<SiteParams> sites = standard_sites();
  int subjects_per_site = 20;
  // Fraction of subjects additionally rendered (same views) at the next site,
  // giving anatomy-identical cross-contrast pairs.
  double paired_fraction = 0.0;
  // Render every subject at every site (traveling phantoms).
  bool traveling = false;
  std::uint64_t seed = 0;
};

// Also returns the anatomy of each subject, keyed by position in subject order.
struct GeneratedDataset {
  Dataset dataset;
  std::vector<std::string> subject_ids;
  std::vector<PhantomSpec> phantoms;
};

GeneratedDataset generate_dataset(const DatasetOptions& opts);

void validate(const DatasetManifest& manifest);

// Record indices of (x, x') drawn uniformly among ordered pairs of distinct
// views of one subject at one site.
std::pair<std::size_t, std::size_t> sample_pair_indices(const DatasetManifest& manifest,
                                                        const std::string& subject_id,
                                                        std::mt19937_64& rng);

std::pair<ImageGrid, ImageGrid> sample_pair(const Dataset& dataset, const std::string& subject_id,
                                            std::mt19937_64& rng);

}  // namespace smd::datagen
