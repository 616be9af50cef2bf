#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sceneseg/rng.hpp"
#include "sceneseg/tensor.hpp"

namespace testsup {

template <typename T>
sceneseg::TensorT<T> random_tensor(size_t n, size_t c, size_t h, size_t w, uint64_t seed,
                                   double scale = 1.0) {
    sceneseg::Rng rng(seed);
    sceneseg::TensorT<T> t(n, c, h, w);
    for (auto& v : t.values()) v = static_cast<T>(rng.normal() * scale);
    return t;
}

/// Independent direct-loop convolution oracle (stride 1, zero padding,
/// cross-correlation). Deliberately the dumbest possible implementation; it
/// must stay independent of the im2col/GEMM path it checks.
template <typename T>
sceneseg::TensorT<T> naive_conv2d(const sceneseg::TensorT<T>& input,
                                  const sceneseg::TensorT<T>& weights, const std::vector<T>& bias,
                                  size_t pad) {
    const size_t n = input.n(), in_c = input.c(), h = input.h(), w = input.w();
    const size_t out_c = weights.n(), kh = weights.h(), kw = weights.w();
    const size_t out_h = h + 2 * pad - kh + 1;
    const size_t out_w = w + 2 * pad - kw + 1;
    sceneseg::TensorT<T> out(n, out_c, out_h, out_w);
    for (size_t b = 0; b < n; ++b)
        for (size_t oc = 0; oc < out_c; ++oc)
            for (size_t oh = 0; oh < out_h; ++oh)
                for (size_t ow = 0; ow < out_w; ++ow) {
                    T acc = bias[oc];
                    for (size_t ic = 0; ic < in_c; ++ic)
                        for (size_t r = 0; r < kh; ++r)
                            for (size_t s = 0; s < kw; ++s) {
                                const ptrdiff_t ih = static_cast<ptrdiff_t>(oh + r) -
                                                     static_cast<ptrdiff_t>(pad);
                                const ptrdiff_t iw = static_cast<ptrdiff_t>(ow + s) -
                                                     static_cast<ptrdiff_t>(pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<ptrdiff_t>(h) ||
                                    iw >= static_cast<ptrdiff_t>(w))
                                    continue;
                                acc += weights.at(oc, ic, r, s) *
                                       input.at(b, ic, static_cast<size_t>(ih),
                                                static_cast<size_t>(iw));
                            }
                    out.at(b, oc, oh, ow) = acc;
                }
    return out;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        dir_ = std::filesystem::temp_directory_path() /
               ("sceneseg_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(dir_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(dir_, ec);
    }
    const std::filesystem::path& path() const { return dir_; }
    std::filesystem::path operator/(const std::string& name) const { return dir_ / name; }

private:
    std::filesystem::path dir_;
};

}  // namespace testsup
