// SPDX-License-Identifier: Apache-2.0
//
// Static SVG line charts from JSONL metric streams.

#pragma once

#include <string>
#include <utility>
#include <vector>

namespace seqjepa {

struct ChartSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y), drawn in order
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<ChartSeries> series;

  std::size_t point_count() const;
};

/// One named JSONL document (a file's contents).
struct JsonlSource {
  std::string name;
  std::string text;
};

/// Builds a chart from training records (x = step, one series per field in
/// `fields`, default loss) or metric records (x = M_val, one series per
/// metric, target, ablation and M_tr). Sources are not mixed: the first
/// record decides. FormatError when no record is found or a line is not a
/// JSON object of the detected kind.
Chart chart_from_jsonl(const std::vector<JsonlSource>& sources, const std::vector<std::string>& fields = {});

/// Self-contained SVG: axes with ticks, one polyline per series and a
/// legend entry per series.
std::string render_svg(const Chart& chart, int width = 720, int height = 440);

}  // namespace seqjepa
