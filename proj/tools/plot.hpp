#pragma once

// SVG rendering of the CLI's CSV dumps: closed-loop traces, sampled
// candidates, cluster histograms, loss curves and evaluation reports.

#include <optional>
#include <string>
#include <vector>

#include "flowdrive/world.hpp"

namespace flowdrive::plot {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws when absent.
  std::size_t column(const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;
};

/// Parses comma-separated text, skipping blank lines and '#' comments.
Table parse_csv(const std::string& text);

enum class Kind { Trace, Samples, Clusters, Loss, Report };
/// Recognizes a dump by its header; throws on anything else.
Kind detect(const Table& t);

/// Renders the table; `map` adds lane corridors behind traces and samples
/// (sample coordinates are taken in the frame of the world's start pose).
std::string render(const Table& t, const std::string& title, const world::World* map = nullptr);

}  // namespace flowdrive::plot
