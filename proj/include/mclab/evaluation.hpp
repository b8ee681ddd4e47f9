#ifndef MCLAB_EVALUATION_HPP
#define MCLAB_EVALUATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mclab/features.hpp"
#include "mclab/models.hpp"

namespace mclab {

/// K x K count matrix, rows = true family, columns = predicted family.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::int64_t> counts;  // row-major K*K

  int k() const { return static_cast<int>(labels.size()); }
  std::int64_t& at(int row, int col) { return counts[static_cast<std::size_t>(row) * k() + col]; }
  std::int64_t at(int row, int col) const { return counts[static_cast<std::size_t>(row) * k() + col]; }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (const auto c : counts) t += c;
    return t;
  }
  std::int64_t trace() const {
    std::int64_t t = 0;
    for (int i = 0; i < k(); ++i) t += at(i, i);
    return t;
  }
  std::int64_t row_sum(int row) const {
    std::int64_t t = 0;
    for (int c = 0; c < k(); ++c) t += at(row, c);
    return t;
  }
};

struct MetricsReport {
  std::string model;
  std::string run_ref;              // seed / provenance note
  double overall_accuracy = 0.0;    // trace/total
  std::vector<double> per_family;   // diagonal/row-sum; NaN when row empty
  std::vector<std::string> labels;
};

/// Argmax predictions (ties -> lowest class index) accumulated into counts.
inline ConfusionMatrix evaluate(Network<float>& net, const ExampleSet& set,
                                const std::vector<std::string>& labels,
                                int batch_size = 256) {
  ConfusionMatrix cm;
  cm.labels = labels;
  cm.counts.assign(labels.size() * labels.size(), 0);
  Tape tape;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i)
      idx.push_back(i);
    auto batch = make_batch<float>(set, idx);
    auto logits = net.forward(tape, batch, ForwardOptions{});
    if (logits.dim(1) != cm.k())
      throw ShapeError(strf("model emits %d classes but %d labels given",
                            logits.dim(1), cm.k()));
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < idx.size(); ++i)
      ++cm.at(batch.labels[i], pred[i]);
    tape.clear();
  }
  return cm;
}

/// Exact rational accuracy metrics; float formatting happens only at the edges.
inline MetricsReport metrics(const ConfusionMatrix& cm) {
  if (cm.k() == 0 || cm.total() == 0) throw DataError("metrics on an empty matrix");
  MetricsReport report;
  report.labels = cm.labels;
  report.overall_accuracy =
      static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
  for (int r = 0; r < cm.k(); ++r) {
    const std::int64_t row = cm.row_sum(r);
    report.per_family.push_back(
        row == 0 ? std::numeric_limits<double>::quiet_NaN()
                 : static_cast<double>(cm.at(r, r)) / static_cast<double>(row));
  }
  return report;
}

inline void to_json(nlohmann::json& j, const MetricsReport& m) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < m.per_family.size(); ++i) {
    nlohmann::json entry{{"family", m.labels[i]}};
    if (std::isnan(m.per_family[i]))
      entry["accuracy"] = nullptr;
    else
      entry["accuracy"] = m.per_family[i];
    per.push_back(entry);
  }
  j = nlohmann::json{{"model", m.model},
                     {"run_ref", m.run_ref},
                     {"overall_accuracy", m.overall_accuracy},
                     {"per_family", per}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& m) {
  j.at("model").get_to(m.model);
  j.at("run_ref").get_to(m.run_ref);
  j.at("overall_accuracy").get_to(m.overall_accuracy);
  m.labels.clear();
  m.per_family.clear();
  for (const auto& entry : j.at("per_family")) {
    m.labels.push_back(entry.at("family").get<std::string>());
    m.per_family.push_back(entry.at("accuracy").is_null()
                               ? std::numeric_limits<double>::quiet_NaN()
                               : entry.at("accuracy").get<double>());
  }
}

// ---------------------------------------------------------------------------
// Paper reference series (Tables 3-6) rendered beside measured accuracies.

struct ReferenceAccuracy {
  const char* model;
  double test_acc;
};

inline constexpr ReferenceAccuracy kReferenceSeries[] = {
    {"mlp", 0.8644},       {"cnn2d", 0.8955},    {"cnn1d", 0.8664},
    {"cnn1d_refined", 0.8932}, {"cnn_opcode", 0.8282}, {"rnn", 0.7294},
    {"lstm", 0.8916},      {"gru", 0.9003},      {"stacked", 0.8990},
    {"resnet152", 0.9150}, {"vgg19", 0.9216},
};

inline std::optional<double> reference_accuracy(const std::string& model) {
  for (const auto& ref : kReferenceSeries)
    if (model == ref.model) return ref.test_acc;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV

/// First row and column carry family names; the corner states the orientation.
inline std::string confusion_to_csv(const ConfusionMatrix& cm) {
  std::string out = "true\\pred";
  for (const auto& l : cm.labels) out += "," + l;
  out += '\n';
  for (int r = 0; r < cm.k(); ++r) {
    out += cm.labels[r];
    for (int c = 0; c < cm.k(); ++c) out += strf(",%lld", static_cast<long long>(cm.at(r, c)));
    out += '\n';
  }
  return out;
}

inline ConfusionMatrix confusion_from_csv(const std::string& text) {
  ConfusionMatrix cm;
  std::vector<std::vector<std::string>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t cpos = 0;
    while (true) {
      const std::size_t comma = line.find(',', cpos);
      cells.push_back(line.substr(cpos, comma == std::string::npos ? std::string::npos
                                                                   : comma - cpos));
      if (comma == std::string::npos) break;
      cpos = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw DataError("empty confusion CSV");
  cm.labels.assign(rows[0].begin() + 1, rows[0].end());
  const int k = static_cast<int>(cm.labels.size());
  if (static_cast<int>(rows.size()) != k + 1)
    throw DataError("confusion CSV row count does not match header");
  cm.counts.assign(static_cast<std::size_t>(k) * k, 0);
  for (int r = 0; r < k; ++r) {
    if (rows[r + 1].size() != static_cast<std::size_t>(k) + 1 || rows[r + 1][0] != cm.labels[r])
      throw DataError("confusion CSV labels disagree at row " + std::to_string(r));
    for (int c = 0; c < k; ++c) cm.at(r, c) = std::stoll(rows[r + 1][c + 1]);
  }
  return cm;
}

// ---------------------------------------------------------------------------
// SVG rendering (self-contained, byte-stable: no timestamps, fixed formatting)

inline std::string confusion_to_svg(const ConfusionMatrix& cm, const std::string& title) {
  const int k = cm.k();
  const int cell = k <= 6 ? 48 : 24;
  const int margin = 90;
  const int width = margin + k * cell + 20;
  const int height = margin + k * cell + 40;
  std::int64_t max_count = 1;
  for (const auto c : cm.counts) max_count = std::max(max_count, c);

  std::string svg = strf(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
      "font-family=\"monospace\" font-size=\"10\">\n",
      width, height);
  svg += strf("<text x=\"%d\" y=\"16\" font-size=\"13\">%s (rows: true, cols: predicted)</text>\n",
              margin, title.c_str());
  for (int r = 0; r < k; ++r) {
    svg += strf("<text x=\"4\" y=\"%d\">%s</text>\n", margin + r * cell + cell / 2 + 4,
                cm.labels[r].c_str());
    svg += strf("<text x=\"%d\" y=\"%d\" transform=\"rotate(-60 %d %d)\">%s</text>\n",
                margin + r * cell + 4, margin - 6, margin + r * cell + 4, margin - 6,
                cm.labels[r].c_str());
  }
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      const double frac = static_cast<double>(cm.at(r, c)) / static_cast<double>(max_count);
      const int shade = 255 - static_cast<int>(frac * 200.0);
      svg += strf("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" "
                  "fill=\"rgb(%d,%d,255)\" stroke=\"#ccc\"/>\n",
                  margin + c * cell, margin + r * cell, cell, cell, shade, shade);
      if (cm.at(r, c) > 0)
        svg += strf("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%lld</text>\n",
                    margin + c * cell + cell / 2, margin + r * cell + cell / 2 + 4,
                    static_cast<long long>(cm.at(r, c)));
    }
  }
  svg += "</svg>\n";
  return svg;
}

/// One entry of the comparison chart and summary table.
struct ReportEntry {
  std::string name;          // architecture name, matches the reference series
  double train_acc = 0.0;
  MetricsReport report;
  std::optional<ConfusionMatrix> confusion;
};

/// Grouped bar chart: measured accuracy beside the paper reference value for
/// every model in the reference series, plus any extra measured entries.
inline std::string comparison_svg(const std::vector<ReportEntry>& entries) {
  struct Bar {
    std::string name;
    std::optional<double> ours;
    std::optional<double> reference;
  };
  std::vector<Bar> bars;
  for (const auto& ref : kReferenceSeries) {
    Bar bar;
    bar.name = ref.model;
    bar.reference = ref.test_acc;
    for (const auto& e : entries)
      if (e.name == ref.model) bar.ours = e.report.overall_accuracy;
    bars.push_back(std::move(bar));
  }
  for (const auto& e : entries)
    if (!reference_accuracy(e.name))
      bars.push_back({e.name, e.report.overall_accuracy, std::nullopt});

  const int group_w = 70, bar_w = 24, chart_h = 260, margin = 50;
  const int width = margin * 2 + group_w * static_cast<int>(bars.size());
  const int height = chart_h + 120;
  std::string svg = strf(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
      "font-family=\"monospace\" font-size=\"10\">\n",
      width, height);
  svg += strf("<text x=\"%d\" y=\"18\" font-size=\"13\">Test accuracy: this run vs reference</text>\n", margin);
  svg += strf("<rect x=\"%d\" y=\"28\" width=\"12\" height=\"12\" fill=\"#4477aa\"/>"
              "<text x=\"%d\" y=\"38\">this run</text>\n", margin, margin + 16);
  svg += strf("<rect x=\"%d\" y=\"28\" width=\"12\" height=\"12\" fill=\"#aaaaaa\"/>"
              "<text x=\"%d\" y=\"38\">reference</text>\n", margin + 110, margin + 126);
  const int base_y = 60 + chart_h;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const int x0 = margin + static_cast<int>(i) * group_w;
    if (bars[i].ours) {
      const int h = static_cast<int>(*bars[i].ours * chart_h);
      svg += strf("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#4477aa\"/>\n",
                  x0, base_y - h, bar_w, h);
      svg += strf("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%.4f</text>\n",
                  x0 + bar_w / 2, base_y - h - 4, *bars[i].ours);
    }
    if (bars[i].reference) {
      const int h = static_cast<int>(*bars[i].reference * chart_h);
      svg += strf("<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#aaaaaa\"/>\n",
                  x0 + bar_w + 2, base_y - h, bar_w, h);
      svg += strf("<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%.4f</text>\n",
                  x0 + bar_w + 2 + bar_w / 2, base_y - h - 4, *bars[i].reference);
    }
    svg += strf("<text x=\"%d\" y=\"%d\" transform=\"rotate(45 %d %d)\">%s</text>\n",
                x0, base_y + 14, x0, base_y + 14, bars[i].name.c_str());
  }
  svg += "</svg>\n";
  return svg;
}

/// summary.csv / comparison.svg / per-model confusion CSV + heatmap.
inline void emit_report(const std::vector<ReportEntry>& entries, const fs::path& out_dir) {
  if (entries.empty()) throw DataError("emit_report needs at least one result");
  fs::create_directories(out_dir);

  std::string summary = "model,train_acc,test_acc,reference_acc\n";
  for (const auto& e : entries) {
    const auto ref = reference_accuracy(e.name);
    summary += strf("%s,%.6f,%.6f,%s\n", e.name.c_str(), e.train_acc,
                    e.report.overall_accuracy,
                    ref ? strf("%.4f", *ref).c_str() : "n/a");
  }
  write_file_text(out_dir / "summary.csv", summary);
  write_file_text(out_dir / "comparison.svg", comparison_svg(entries));

  for (const auto& e : entries) {
    if (!e.confusion) continue;
    write_file_text(out_dir / ("confusion_" + e.name + ".csv"),
                    confusion_to_csv(*e.confusion));
    write_file_text(out_dir / ("confusion_" + e.name + ".svg"),
                    confusion_to_svg(*e.confusion, e.name));
  }
}

}  // namespace mclab

#endif  // MCLAB_EVALUATION_HPP
