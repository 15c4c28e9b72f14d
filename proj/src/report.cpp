#include "morphvae/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace morphvae {

const std::vector<QuotedResult>& quoted_results() {
  static const std::vector<QuotedResult> rows = {
      {"pca", 2, 44.7, false},  {"umap", 2, 95.5, true},  {"vae", 2, 63.0, false},  {"ours", 2, 65.7, false},
      {"pca", 64, 91.7, false}, {"umap", 64, 96.0, true}, {"vae", 64, 96.2, false}, {"ours", 64, 98.4, false},
  };
  return rows;
}

std::optional<double> quoted_accuracy(const std::string& algorithm, std::size_t latent_dim) {
  for (const auto& q : quoted_results()) {
    if (algorithm == q.algorithm && latent_dim == q.latent_dim) return q.test_accuracy_percent;
  }
  return std::nullopt;
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << std::setprecision(10);
  return os;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::string probe_csv_header() { return "algorithm,latent_dim,train_accuracy,test_accuracy,source"; }

std::string probe_csv_row(const ProbeReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << r.algorithm << ',' << r.latent_dim << ',';
  if (std::isfinite(r.train_accuracy)) os << r.train_accuracy;
  os << ',' << r.test_accuracy << ',' << r.source;
  return os.str();
}

void write_probe_csv(const fs::path& path, const std::vector<ProbeReport>& rows, bool include_echoed) {
  auto os = open_out(path);
  os << probe_csv_header() << '\n';
  for (const auto& r : rows) os << probe_csv_row(r) << '\n';
  if (include_echoed) {
    for (const auto& q : quoted_results()) {
      if (!q.echoed) continue;
      ProbeReport r;
      r.algorithm = q.algorithm;
      r.latent_dim = q.latent_dim;
      r.train_accuracy = std::numeric_limits<double>::quiet_NaN();
      r.test_accuracy = q.test_accuracy_percent / 100.0;
      r.source = "paper";
      os << probe_csv_row(r) << '\n';
    }
  }
}

std::vector<ProbeReport> read_probe_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != probe_csv_header()) throw std::runtime_error(path.string() + ": unexpected header");
  std::vector<ProbeReport> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) throw std::runtime_error(path.string() + ": malformed row " + line);
    ProbeReport r;
    r.algorithm = f[0];
    r.latent_dim = std::stoul(f[1]);
    r.train_accuracy = f[2].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[2]);
    r.test_accuracy = std::stod(f[3]);
    r.source = f[4];
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_scatter_csv(const fs::path& path, const Tensor<double>& xy, std::span<const std::uint8_t> labels) {
  if (xy.rank() != 2 || xy.dim(1) != 2 || xy.dim(0) != labels.size()) {
    throw ShapeError("scatter csv", xy.shape(), Shape{labels.size(), 2});
  }
  auto os = open_out(path);
  os << "x,y,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    os << xy[2 * i] << ',' << xy[2 * i + 1] << ',' << int(labels[i]) << '\n';
  }
}

void write_orbit_csv(const fs::path& path, const std::vector<OrbitTrace>& traces) {
  auto os = open_out(path);
  const std::size_t d = traces.empty() ? 0 : traces.front().points.dim(1);
  os << "digit,image_index,step,angle_degrees";
  for (std::size_t j = 0; j < d; ++j) os << ",z" << j;
  os << '\n';
  for (const auto& t : traces) {
    for (std::size_t s = 0; s < t.points.dim(0); ++s) {
      os << t.digit << ',' << t.image_index << ',' << s << ',' << kOrbitStepDegrees * static_cast<double>(s);
      for (std::size_t j = 0; j < d; ++j) os << ',' << t.points[s * d + j];
      os << '\n';
    }
  }
}

std::string render_svg(const SvgPlot& plot) {
  // Tableau-10
  static const char* colours[10] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                    "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  auto extend = [&](const Tensor<double>& p) {
    if (p.rank() != 2 || p.dim(1) != 2) throw ShapeError("svg points", p.shape(), Shape{0, 2});
    for (std::size_t i = 0; i < p.dim(0); ++i) {
      xmin = std::min(xmin, p[2 * i]);
      xmax = std::max(xmax, p[2 * i]);
      ymin = std::min(ymin, p[2 * i + 1]);
      ymax = std::max(ymax, p[2 * i + 1]);
    }
  };
  const bool has_points = plot.points.rank() == 2;
  if (has_points) extend(plot.points);
  for (const auto& [_, line] : plot.polylines) extend(line);
  if (!std::isfinite(xmin)) xmin = ymin = -1, xmax = ymax = 1;
  if (xmax - xmin < 1e-12) xmin -= 1, xmax += 1;
  if (ymax - ymin < 1e-12) ymin -= 1, ymax += 1;

  const double margin = 40, legend = 90;
  const double pw = plot.width - 2 * margin - legend, ph = plot.height - 2 * margin;
  auto sx = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * pw; };
  auto sy = [&](double y) { return margin + (ymax - y) / (ymax - ymin) * ph; };

  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << plot.width << "\" height=\"" << plot.height
     << "\" viewBox=\"0 0 " << plot.width << ' ' << plot.height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#888\"/>\n";
  if (!plot.title.empty()) {
    std::string t;
    for (char c : plot.title) {
      switch (c) {
        case '<': t += "&lt;"; break;
        case '>': t += "&gt;"; break;
        case '&': t += "&amp;"; break;
        case '"': t += "&quot;"; break;
        default: t += c;
      }
    }
    os << "<text x=\"" << margin << "\" y=\"" << margin - 12 << "\" font-family=\"sans-serif\" font-size=\"14\">" << t
       << "</text>\n";
  }
  if (has_points) {
    os << "<g id=\"scatter\">\n";
    for (std::size_t i = 0; i < plot.points.dim(0); ++i) {
      const int c = i < plot.labels.size() ? plot.labels[i] % 10 : 0;
      os << "<circle cx=\"" << sx(plot.points[2 * i]) << "\" cy=\"" << sy(plot.points[2 * i + 1])
         << "\" r=\"1.2\" fill=\"" << colours[c] << "\" fill-opacity=\"0.5\"/>\n";
    }
    os << "</g>\n";
  }
  if (!plot.polylines.empty()) {
    os << "<g id=\"orbits\" fill=\"none\" stroke-width=\"1.5\">\n";
    for (const auto& [label, line] : plot.polylines) {
      os << "<polyline stroke=\"" << colours[label % 10] << "\" points=\"";
      for (std::size_t i = 0; i < line.dim(0); ++i) {
        if (i) os << ' ';
        os << sx(line[2 * i]) << ',' << sy(line[2 * i + 1]);
      }
      os << "\"/>\n";
    }
    os << "</g>\n";
  }
  os << "<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
  for (int c = 0; c < 10; ++c) {
    const double y = margin + 10 + 20 * c;
    const double x = plot.width - legend + 10;
    os << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\"" << colours[c] << "\"/>"
       << "<text x=\"" << x + 16 << "\" y=\"" << y << "\">" << c << "</text>\n";
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------

std::string RunManifest::to_text() const {
  std::ostringstream os;
  os << "[run]\ncommand=" << command << "\ntool_version=" << tool_version << '\n';
  for (const auto& [k, v] : extra) os << k << '=' << v << '\n';
  os << "[seeds]\n";
  for (const auto& [k, v] : seeds) os << k << '=' << v << '\n';
  os << "[data]\n";
  for (const auto& [sha, file] : data_checksums) os << sha << "  " << file << '\n';
  os << "[artifacts]\n";
  for (const auto& a : artifacts) os << a << '\n';
  os << "[registry]\n" << registry_table;
  if (!registry_table.empty() && registry_table.back() != '\n') os << '\n';
  // Last so it can hold any text.
  os << "[config]\n" << config_text;
  if (!config_text.empty() && config_text.back() != '\n') os << '\n';
  return os.str();
}

RunManifest RunManifest::parse(const std::string& text) {
  RunManifest m;
  std::istringstream is(text);
  std::string line, section;
  auto kv = [](const std::string& l) {
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw std::runtime_error("manifest: expected key=value, got '" + l + "'");
    return std::pair{l.substr(0, eq), l.substr(eq + 1)};
  };
  while (std::getline(is, line)) {
    if (section != "config" && section != "registry" && line.size() > 2 && line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    if (section == "registry" && line == "[config]") {
      section = "config";
      continue;
    }
    if (section == "config") {
      m.config_text += line + '\n';
    } else if (section == "registry") {
      m.registry_table += line + '\n';
    } else if (line.empty()) {
      continue;
    } else if (section == "run") {
      auto [k, v] = kv(line);
      if (k == "command") m.command = v;
      else if (k == "tool_version") m.tool_version = v;
      else m.extra[k] = v;
    } else if (section == "seeds") {
      auto [k, v] = kv(line);
      m.seeds[k] = v;
    } else if (section == "data") {
      const auto sp = line.find("  ");
      if (sp == std::string::npos) throw std::runtime_error("manifest: malformed checksum line '" + line + "'");
      m.data_checksums.emplace_back(line.substr(0, sp), line.substr(sp + 2));
    } else if (section == "artifacts") {
      m.artifacts.push_back(line);
    } else {
      throw std::runtime_error("manifest: unknown section '" + section + "'");
    }
  }
  return m;
}

void append_manifest(const fs::path& out_dir, const RunManifest& m) {
  fs::create_directories(out_dir);
  const fs::path path = out_dir / kManifestFile;
  const bool existing = fs::exists(path) && fs::file_size(path) > 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (existing) os << "---\n";
  os << m.to_text();
}

std::vector<RunManifest> read_manifests(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<RunManifest> out;
  std::string line, chunk;
  while (std::getline(is, line)) {
    if (line == "---") {
      out.push_back(RunManifest::parse(chunk));
      chunk.clear();
    } else {
      chunk += line + '\n';
    }
  }
  if (!chunk.empty()) out.push_back(RunManifest::parse(chunk));
  return out;
}

}  // namespace morphvae
