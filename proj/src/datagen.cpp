#include "smd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "smd/error.hpp"

namespace smd::datagen {
namespace {

std::string padded(const char* prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%06zu", prefix, n);
  return buf;
}

// Shape parameters as seen from a given view.
Ellipse view_transform(const Ellipse& e, const PhantomSpec& spec, int view) {
  const double cy = spec.height / 2.0;
  const double cx = spec.width / 2.0;
  const double scale = std::min(cy, cx);
  const double u = (e.center_x - cx) / scale;
  const double v = (e.center_y - cy) / scale;
  const double phi = view * spec.view_rotation_rad;
  const double c = std::cos(phi);
  const double s = std::sin(phi);
  double ru = c * u - s * v;
  const double rv = s * u + c * v;
  double rot = e.rotation_rad + phi;
  if (view % 2 == 1) {
    ru = -ru;
    rot = -rot;
  }
  Ellipse out = e;
  out.center_x = std::clamp(cx + ru * scale, 0.0, std::nextafter(spec.width, 0.0));
  out.center_y = std::clamp(cy + rv * scale, 0.0, std::nextafter(spec.height, 0.0));
  out.rotation_rad = rot;
  return out;
}

bool contains(const Ellipse& e, double py, double px) {
  const double dx = px - e.center_x;
  const double dy = py - e.center_y;
  const double c = std::cos(e.rotation_rad);
  const double s = std::sin(e.rotation_rad);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  const double q = (lx * lx) / (e.axis_a * e.axis_a) + (ly * ly) / (e.axis_b * e.axis_b);
  return q <= 1.0;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

PhantomSpec generate_phantom(const PhantomOptions& opts, std::uint64_t seed) {
  if (opts.min_shapes < 1 || opts.max_shapes < opts.min_shapes) {
    throw ValidationError("phantom shape count range is empty");
  }
  if (opts.num_classes < 2) throw ValidationError("num_classes must be at least 2");

  std::mt19937_64 rng(mix_seed(seed, 0x5eed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> count(opts.min_shapes, opts.max_shapes);
  std::uniform_int_distribution<int> tissue(1, opts.num_classes - 1);

  PhantomSpec spec;
  spec.height = opts.height;
  spec.width = opts.width;
  spec.num_views = opts.num_views;
  spec.num_classes = opts.num_classes;
  spec.view_rotation_rad = opts.view_rotation_rad;

  const double size = std::min(opts.height, opts.width);
  const double cy = opts.height / 2.0;
  const double cx = opts.width / 2.0;
  const int n = count(rng);

  // A large body ellipse of class 1, then smaller structures inside it.
  Ellipse body;
  body.center_y = cy + (unit(rng) - 0.5) * 0.1 * size;
  body.center_x = cx + (unit(rng) - 0.5) * 0.1 * size;
  body.axis_a = (0.30 + 0.12 * unit(rng)) * size;
  body.axis_b = (0.30 + 0.12 * unit(rng)) * size;
  body.rotation_rad = unit(rng) * std::numbers::pi;
  body.tissue_class = 1;
  spec.shapes.push_back(body);

  for (int i = 1; i < n; ++i) {
    Ellipse e;
    const double r = 0.24 * size * std::sqrt(unit(rng));
    const double t = 2.0 * std::numbers::pi * unit(rng);
    e.center_y = std::clamp(body.center_y + r * std::sin(t), 0.0, opts.height - 1.0);
    e.center_x = std::clamp(body.center_x + r * std::cos(t), 0.0, opts.width - 1.0);
    e.axis_a = (0.07 + 0.15 * unit(rng)) * size;
    e.axis_b = (0.07 + 0.15 * unit(rng)) * size;
    e.rotation_rad = unit(rng) * std::numbers::pi;
    e.tissue_class = tissue(rng);
    spec.shapes.push_back(e);
  }
  return spec;
}

void validate(const PhantomSpec& spec) {
  if (spec.height < 16 || spec.width < 16) {
    throw ValidationError("phantom grid must be at least 16x16");
  }
  if (spec.num_views < 2) throw ValidationError("phantom num_views must be >= 2");
  if (spec.num_classes < 2) throw ValidationError("phantom num_classes must be >= 2");
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& e = spec.shapes[i];
    const std::string tag = "shape " + std::to_string(i);
    if (!(e.axis_a > 0.0) || !(e.axis_b > 0.0)) {
      throw ValidationError(tag + ": degenerate shape (axes must be > 0)");
    }
    if (!(e.center_y >= 0.0 && e.center_y < spec.height && e.center_x >= 0.0 &&
          e.center_x < spec.width)) {
      throw ValidationError(tag + ": centre lies outside the grid");
    }
    if (e.tissue_class < 0 || e.tissue_class >= spec.num_classes) {
      throw ValidationError(tag + ": tissue_class out of range [0, K)");
    }
  }
}

void validate(const SiteParams& site, int num_classes) {
  const std::string tag = "site " + std::to_string(site.site_id);
  if (static_cast<int>(site.tissue_intensity.size()) != num_classes) {
    throw ValidationError(tag + ": tissue_intensity has " +
                          std::to_string(site.tissue_intensity.size()) +
                          " entries but num_classes (K) is " + std::to_string(num_classes));
  }
  for (double v : site.tissue_intensity) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(tag + ": tissue_intensity outside [0, 1]");
  }
  if (!(site.gamma > 0.0)) throw ValidationError(tag + ": gamma must be > 0");
  if (!(site.bias_amplitude >= 0.0 && site.bias_amplitude < 1.0)) {
    throw ValidationError(tag + ": bias_amplitude must be in [0, 1)");
  }
  if (!(site.noise_sigma >= 0.0)) throw ValidationError(tag + ": noise_sigma must be >= 0");
}

void validate_site_separation(std::span<const SiteParams> sites) {
  for (std::size_t i = 0; i < sites.size(); ++i) {
    for (std::size_t j = i + 1; j < sites.size(); ++j) {
      if (sites[i].site_id == sites[j].site_id) {
        throw ValidationError("duplicate site_id " + std::to_string(sites[i].site_id));
      }
      const auto& a = sites[i].tissue_intensity;
      const auto& b = sites[j].tissue_intensity;
      if (a.size() != b.size()) throw ValidationError("sites disagree on the number of classes");
      double gap = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) gap = std::max(gap, std::abs(a[k] - b[k]));
      if (gap < 0.05) {
        throw ValidationError("sites " + std::to_string(sites[i].site_id) + " and " +
                              std::to_string(sites[j].site_id) +
                              " have tissue_intensity closer than 0.05");
      }
    }
  }
}

std::vector<int> label_map(const PhantomSpec& spec, int view_index) {
  validate(spec);
  if (view_index < 0 || view_index >= spec.num_views) {
    throw ValidationError("view_index " + std::to_string(view_index) + " outside [0, num_views)");
  }
  std::vector<Ellipse> shapes;
  shapes.reserve(spec.shapes.size());
  for (const auto& e : spec.shapes) shapes.push_back(view_transform(e, spec, view_index));

  std::vector<int> labels(static_cast<std::size_t>(spec.height) * spec.width, 0);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      int cls = 0;
      for (const auto& e : shapes) {
        if (contains(e, y + 0.5, x + 0.5)) cls = e.tissue_class;
      }
      labels[static_cast<std::size_t>(y) * spec.width + x] = cls;
    }
  }
  return labels;
}

std::vector<double> bias_field(const SiteParams& site, int height, int width) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  std::vector<double> field(n, 1.0);
  if (site.bias_amplitude == 0.0) return field;

  const double phase = 1.7 * site.site_id + 0.3;
  const double alpha = std::cos(phase);
  const double beta = std::sin(phase);
  const double scale = std::min(height, width) / 2.0;
  std::vector<double> poly(n);
  double mean = 0.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (x + 0.5 - width / 2.0) / scale;
      const double v = (y + 0.5 - height / 2.0) / scale;
      const double p = alpha * (u * u + v * v) + beta * (u * u * v * v);
      poly[static_cast<std::size_t>(y) * width + x] = p;
      mean += p;
    }
  }
  mean /= static_cast<double>(n);
  double peak = 0.0;
  for (auto& p : poly) {
    p -= mean;
    peak = std::max(peak, std::abs(p));
  }
  if (peak == 0.0) return field;
  for (std::size_t i = 0; i < n; ++i) field[i] = 1.0 + site.bias_amplitude * poly[i] / peak;
  return field;
}

ImageGrid render_phantom(const PhantomSpec& spec, const SiteParams& site, int view_index,
                         std::uint64_t rng_seed) {
  validate(site, spec.num_classes);
  const auto labels = label_map(spec, view_index);
  const auto bias = bias_field(site, spec.height, spec.width);

  std::vector<double> transfer(site.tissue_intensity.size());
  for (std::size_t k = 0; k < transfer.size(); ++k) {
    transfer[k] = std::pow(site.tissue_intensity[k], site.gamma);
  }

  std::mt19937_64 rng(mix_seed(mix_seed(rng_seed, static_cast<std::uint64_t>(view_index)),
                               static_cast<std::uint64_t>(site.site_id)));
  std::normal_distribution<double> noise(0.0, 1.0);

  ImageGrid img(spec.height, spec.width);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double v = bias[i] * transfer[static_cast<std::size_t>(labels[i])];
    if (site.noise_sigma > 0.0) v += site.noise_sigma * noise(rng);
    img.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return img;
}

std::vector<SiteParams> standard_sites(double bias_amplitude, double noise_sigma) {
  std::vector<SiteParams> sites = {
      {0, {0.0, 0.25, 0.55, 0.85}, 1.0, bias_amplitude, noise_sigma},
      {1, {0.0, 0.40, 0.70, 0.95}, 1.0, bias_amplitude, noise_sigma},
      {2, {0.0, 0.20, 0.45, 0.70}, 1.2, bias_amplitude, noise_sigma},
      {3, {0.0, 0.35, 0.50, 0.80}, 0.8, bias_amplitude, noise_sigma},
  };
  return sites;
}

GeneratedDataset generate_dataset(const DatasetOptions& opts) {
  if (opts.sites.empty()) throw ValidationError("dataset needs at least one site");
  if (opts.subjects_per_site < 1) throw ValidationError("subjects_per_site must be >= 1");
  if (!(opts.paired_fraction >= 0.0 && opts.paired_fraction <= 1.0)) {
    throw ValidationError("paired_fraction must lie in [0, 1]");
  }
  for (const auto& s : opts.sites) validate(s, opts.phantom.num_classes);
  validate_site_separation(opts.sites);

  GeneratedDataset out;
  auto& records = out.dataset.manifest.records;
  const auto& po = opts.phantom;
  const std::size_t num_sites = opts.sites.size();
  const auto paired_per_site =
      static_cast<int>(std::lround(opts.paired_fraction * opts.subjects_per_site));

  std::size_t subject_counter = 0;
  for (std::size_t home = 0; home < num_sites; ++home) {
    for (int j = 0; j < opts.subjects_per_site; ++j) {
      const std::string subject_id = padded("subj", subject_counter);
      const std::uint64_t subject_seed = mix_seed(opts.seed, subject_counter);
      PhantomSpec spec = generate_phantom(po, subject_seed);
      validate(spec);

      std::vector<std::size_t> render_sites{home};
      if (opts.traveling) {
        render_sites.clear();
        for (std::size_t s = 0; s < num_sites; ++s) render_sites.push_back(s);
      } else if (j < paired_per_site && num_sites > 1) {
        render_sites.push_back((home + 1) % num_sites);
      }

      for (std::size_t s : render_sites) {
        const auto& site = opts.sites[s];
        for (int v = 0; v < po.num_views; ++v) {
          ManifestRecord rec;
          rec.sample_id = padded("smp", records.size());
          rec.subject_id = subject_id;
          rec.site_id = site.site_id;
          rec.view_index = v;
          rec.file_path = "grids/" + rec.sample_id + ".smdg";
          rec.height = po.height;
          rec.width = po.width;
          out.dataset.grids.push_back(
              render_phantom(spec, site, v, mix_seed(subject_seed, 0xa11ce)));
          records.push_back(std::move(rec));
        }
      }
      out.subject_ids.push_back(subject_id);
      out.phantoms.push_back(std::move(spec));
      ++subject_counter;
    }
  }
  return out;
}

void validate(const DatasetManifest& manifest) {
  std::set<std::string> ids;
  std::set<std::tuple<std::string, int, int>> keys;
  for (const auto& r : manifest.records) {
    if (!ids.insert(r.sample_id).second) {
      throw ValidationError("duplicate sample_id '" + r.sample_id + "'");
    }
    if (!keys.insert({r.subject_id, r.site_id, r.view_index}).second) {
      throw ValidationError("duplicate (subject, site, view) for sample '" + r.sample_id + "'");
    }
    if (r.height <= 0 || r.width <= 0) {
      throw ValidationError("sample '" + r.sample_id + "' has non-positive size");
    }
    if (r.view_index < 0) throw ValidationError("sample '" + r.sample_id + "' has negative view");
  }
}

std::pair<std::size_t, std::size_t> sample_pair_indices(const DatasetManifest& manifest,
                                                        const std::string& subject_id,
                                                        std::mt19937_64& rng) {
  std::map<int, std::vector<std::size_t>> by_site;
  bool found = false;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.subject_id != subject_id) continue;
    found = true;
    by_site[r.site_id].push_back(i);
  }
  if (!found) throw ValidationError("unknown subject '" + subject_id + "'");

  std::vector<const std::vector<std::size_t>*> eligible;
  for (const auto& [site, idx] : by_site) {
    if (idx.size() >= 2) eligible.push_back(&idx);
  }
  if (eligible.empty()) {
    throw ValidationError("insufficient views: subject '" + subject_id +
                          "' has fewer than 2 views at every site");
  }
  const auto& idx =
      *eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
  const std::size_t n = idx.size();
  const std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::size_t second = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
  if (second >= first) ++second;
  return {idx[first], idx[second]};
}

std::pair<ImageGrid, ImageGrid> sample_pair(const Dataset& dataset, const std::string& subject_id,
                                            std::mt19937_64& rng) {
  auto [i, j] = sample_pair_indices(dataset.manifest, subject_id, rng);
  return {dataset.grids.at(i), dataset.grids.at(j)};
}

}  // namespace smd::datagen
