#pragma once

#include <filesystem>

#include "ctseg/trainer.hpp"

namespace ctseg::plot {

// Three stacked panels (supervised, consistency, validation loss) as a
// standalone SVG.
void write_loss_curves_svg(const train::CurveLog& log, const std::filesystem::path& out);

}  // namespace ctseg::plot
