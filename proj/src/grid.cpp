#include "psm/grid.hpp"

#include <algorithm>
#include <cmath>

#include "psm/common.hpp"

namespace psm {

namespace {

struct Tap {
    int lo;
    int hi;
    double frac;
};

std::vector<Tap> taps(int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    for (int i = 0; i < out; ++i) {
        const double pos = out == 1 ? 0.5 * (in - 1) : static_cast<double>(i) * (in - 1) / (out - 1);
        int lo = static_cast<int>(std::floor(pos));
        lo = std::clamp(lo, 0, in - 1);
        const int hi = std::min(lo + 1, in - 1);
        t[static_cast<std::size_t>(i)] = {lo, hi, pos - lo};
    }
    return t;
}

}  // namespace

std::vector<double> bilinear_resize(std::span<const double> src, int rows, int cols, int channels, int out_rows,
                                    int out_cols) {
    if (rows < 1 || cols < 1 || channels < 1) throw ValidationError("bilinear_resize: empty source grid");
    if (out_rows < 1 || out_cols < 1) throw ValidationError("bilinear_resize: zero-sized target");
    if (src.size() != static_cast<std::size_t>(rows) * cols * channels)
        throw ValidationError("bilinear_resize: source size does not match its dimensions");

    const auto ry = taps(rows, out_rows);
    const auto rx = taps(cols, out_cols);
    const auto at = [&](int r, int c, int ch) {
        return src[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
    };
    std::vector<double> out(static_cast<std::size_t>(out_rows) * out_cols * channels);
    for (int i = 0; i < out_rows; ++i) {
        const auto& y = ry[static_cast<std::size_t>(i)];
        for (int j = 0; j < out_cols; ++j) {
            const auto& x = rx[static_cast<std::size_t>(j)];
            for (int ch = 0; ch < channels; ++ch) {
                double top = at(y.lo, x.lo, ch);
                double bottom = at(y.hi, x.lo, ch);
                if (x.frac != 0.0) {
                    top += x.frac * (at(y.lo, x.hi, ch) - top);
                    bottom += x.frac * (at(y.hi, x.hi, ch) - bottom);
                }
                const double v = y.frac != 0.0 ? top + y.frac * (bottom - top) : top;
                out[(static_cast<std::size_t>(i) * out_cols + j) * channels + ch] = v;
            }
        }
    }
    return out;
}

}  // namespace psm
