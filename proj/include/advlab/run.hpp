#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "advlab/bilevel.hpp"

namespace advlab {

struct MetricRow {
  std::size_t step = 0;
  double wall_ms = 0.0;  // excluded from reproducibility comparisons
  Metrics metrics;
};

using RowSink = std::function<void(const MetricRow&)>;

/// Per-round metrics of one training run plus its final summary.
struct RunRecord {
  std::string kind;
  bool exploratory = false;
  std::vector<MetricRow> rows;
  Metrics summary;
};

/// Milliseconds since construction.
class Stopwatch {
 public:
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Appends a row to the record and forwards it to the sink, if any.
inline void emit_row(RunRecord& rec, const RowSink& sink, MetricRow row) {
  if (sink) sink(row);
  rec.rows.push_back(std::move(row));
}

}  // namespace advlab
