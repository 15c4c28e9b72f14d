#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "morphvae/evaluate.hpp"

namespace morphvae {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

/// A separability figure from the reference results, echoed verbatim into
/// reports with source=paper. Percentages.
struct QuotedResult {
  const char* algorithm;
  std::size_t latent_dim;
  double test_accuracy_percent;
  bool echoed;  // only rows for methods this project does not implement
};

const std::vector<QuotedResult>& quoted_results();
std::optional<double> quoted_accuracy(const std::string& algorithm, std::size_t latent_dim);

// CSV: algorithm,latent_dim,train_accuracy,test_accuracy,source
// Accuracies are fractions; quoted rows leave train_accuracy empty.
std::string probe_csv_header();
std::string probe_csv_row(const ProbeReport& r);
void write_probe_csv(const fs::path& path, const std::vector<ProbeReport>& rows, bool include_echoed = true);
/// Rows parsed back; empty train_accuracy becomes NaN.
std::vector<ProbeReport> read_probe_csv(const fs::path& path);

/// CSV x,y,label.
void write_scatter_csv(const fs::path& path, const Tensor<double>& xy, std::span<const std::uint8_t> labels);

/// CSV digit,image_index,step,angle_degrees,z0..z{d-1}.
void write_orbit_csv(const fs::path& path, const std::vector<OrbitTrace>& traces);

struct SvgPlot {
  std::string title;
  Tensor<double> points;              // (n, 2) scatter, may be empty
  std::vector<std::uint8_t> labels;   // colours the scatter
  std::vector<std::pair<std::uint8_t, Tensor<double>>> polylines;  // (label, (m, 2))
  double width = 640;
  double height = 640;
};

/// Standalone SVG with scatter, polylines and a ten-entry legend.
std::string render_svg(const SvgPlot& plot);

/// Everything needed to replay a command.
struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::string config_text;
  std::string registry_table;
  std::map<std::string, std::string> seeds;
  std::vector<std::pair<std::string, std::string>> data_checksums;  // (sha256, file)
  std::vector<std::string> artifacts;
  std::map<std::string, std::string> extra;

  std::string to_text() const;
  static RunManifest parse(const std::string& text);
};

inline constexpr const char* kManifestFile = "manifest.txt";

/// Appends to out_dir/manifest.txt; entries are separated by "---" lines.
void append_manifest(const fs::path& out_dir, const RunManifest& m);
/// All entries in a manifest file, in write order.
std::vector<RunManifest> read_manifests(const fs::path& path);

}  // namespace morphvae
