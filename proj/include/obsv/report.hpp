/*
 * Copyright 2026 The obsv Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef OBSV_REPORT_HPP_
#define OBSV_REPORT_HPP_

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "obsv/error.hpp"

namespace obsv {

inline constexpr const char* kVersion = "0.1.0";

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return out.str();
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("SHA-256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
  return out.str();
}

// Deterministic part of the provenance block. The wall-clock timestamp is kept
// out of it so identical runs give identical reports.
struct Provenance {
  std::string command;
  std::string config_digest;
  std::vector<std::pair<std::string, std::string>> inputs;  // (path, sha256)

  void add_input(const std::filesystem::path& path) { add_input(path.string(), path); }
  void add_input(const std::string& label, const std::filesystem::path& path) {
    inputs.emplace_back(label, sha256_file(path));
  }
};

inline void to_json(nlohmann::json& j, const Provenance& p) {
  nlohmann::json in = nlohmann::json::array();
  for (const auto& [path, digest] : p.inputs) in.push_back({{"path", path}, {"sha256", digest}});
  j = {{"tool", "obsv"},
       {"version", kVersion},
       {"command", p.command},
       {"config_sha256", p.config_digest},
       {"inputs", in}};
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Writes into one output directory. Files land through a temporary name and a
// rename, so a crash never leaves a half-written report under its final name.
class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory " + dir_.string() + ": " + ec.message());
    std::filesystem::remove(dir_ / kFailedMarker, ec);
  }

  static constexpr const char* kFailedMarker = "FAILED.json";

  const std::filesystem::path& path() const { return dir_; }
  const std::vector<std::string>& written() const { return written_; }

  void write_text(const std::string& name, const std::string& text) {
    const auto final_path = dir_ / name;
    const auto tmp = dir_ / (name + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
      out << text;
      if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, final_path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
    written_.push_back(name);
  }

  void write_json(const std::string& name, const nlohmann::json& j) { write_text(name, j.dump(2) + "\n"); }

  void write_run_info(nlohmann::json j) {
    j["timestamp_utc"] = utc_timestamp();
    j["files"] = written_;
    write_json("provenance.json", j);
  }

  // Marks the directory as incomplete; anything else in it is partial.
  void mark_failed(const Error& e) noexcept { mark_failed(to_string(e.kind()), e.what()); }

  void mark_failed(const std::string& kind, const std::string& message) noexcept {
    try {
      nlohmann::json j = {{"status", "failed"}, {"error_kind", kind}, {"message", message}, {"partial_files", written_}};
      std::ofstream out(dir_ / kFailedMarker);
      out << j.dump(2) << '\n';
    } catch (...) {
    }
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> written_;
};

// ---- CSV ---------------------------------------------------------------------

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string csv_cell(const nlohmann::json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return csv_escape(v.get<std::string>());
  if (v.is_number_float()) {
    std::ostringstream o;
    o << std::setprecision(10) << v.get<double>();
    return o.str();
  }
  return csv_escape(v.dump());
}

// Rows are JSON objects; columns follow `columns`.
inline std::string to_csv(const std::vector<std::string>& columns, const nlohmann::json& rows) {
  std::ostringstream out;
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << csv_escape(columns[c]);
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      out << (c ? "," : "");
      if (row.contains(columns[c])) out << csv_cell(row[columns[c]]);
    }
    out << '\n';
  }
  return out.str();
}

// ---- SVG line plots ----------------------------------------------------------

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
  std::vector<std::pair<std::string, double>> hlines;  // labelled reference levels
  int width = 640;
  int height = 400;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

}  // namespace detail

inline std::string render_svg(const PlotSpec& p) {
  static constexpr std::array<const char*, 6> kColors = {"#1f77b4", "#d62728", "#2ca02c",
                                                         "#9467bd", "#ff7f0e", "#17becf"};
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : p.series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) {
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
  }
  for (const auto& [label, v] : p.hlines) y0 = std::min(y0, v), y1 = std::max(y1, v);
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double left = 60, right = p.width - 20.0, top = 40, bottom = p.height - 50.0;
  auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
  auto sy = [&](double y) { return bottom - (y - y0) / (y1 - y0) * (bottom - top); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << p.width << "\" height=\"" << p.height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << p.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << detail::xml_escape(p.title) << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\"" << bottom
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
    o << "<text x=\"" << sx(xv) << "\" y=\"" << bottom + 16 << "\" text-anchor=\"middle\">" << detail::fmt(xv)
      << "</text>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << detail::fmt(yv, 3)
      << "</text>\n";
  }
  o << "<text x=\"" << (left + right) / 2 << "\" y=\"" << p.height - 12 << "\" text-anchor=\"middle\">"
    << detail::xml_escape(p.x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << (top + bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (top + bottom) / 2 << ")\">" << detail::xml_escape(p.y_label) << "</text>\n";
  for (const auto& [label, v] : p.hlines) {
    o << "<line x1=\"" << left << "\" y1=\"" << sy(v) << "\" x2=\"" << right << "\" y2=\"" << sy(v)
      << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
    o << "<text x=\"" << right - 4 << "\" y=\"" << sy(v) - 4 << "\" text-anchor=\"end\" fill=\"gray\">"
      << detail::xml_escape(label) << "</text>\n";
  }
  for (std::size_t s = 0; s < p.series.size(); ++s) {
    const auto& ser = p.series[s];
    const char* color = kColors[s % kColors.size()];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < std::min(ser.x.size(), ser.y.size()); ++i) {
      if (std::isfinite(ser.y[i])) o << sx(ser.x[i]) << "," << sy(ser.y[i]) << " ";
    }
    o << "\"/>\n";
    for (std::size_t i = 0; i < std::min(ser.x.size(), ser.y.size()); ++i) {
      if (std::isfinite(ser.y[i])) {
        o << "<circle cx=\"" << sx(ser.x[i]) << "\" cy=\"" << sy(ser.y[i]) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
      }
    }
    o << "<text x=\"" << left + 10 << "\" y=\"" << top + 14 + 16 * static_cast<double>(s) << "\" fill=\"" << color
      << "\">" << detail::xml_escape(ser.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace obsv

#endif  // OBSV_REPORT_HPP_
