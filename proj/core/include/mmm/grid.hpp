#pragma once

#include "mmm/autodiff.hpp"
#include "mmm/common.hpp"

namespace mmm {

// Dense H x W x C raw field. Cells are stored as an (h*w) x c matrix in
// row-major cell order. Categorical fields use c = 1 with class ids as reals.
template <class T>
struct GridT {
  int h = 0, w = 0, c = 0;
  ad::Mat<T> data;

  GridT() = default;
  GridT(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(ad::Mat<T>::Zero(h_ * w_, c_)) {}

  T& at(int y, int x, int ch) { return data(y * w + x, ch); }
  T at(int y, int x, int ch) const { return data(y * w + x, ch); }
  int cells() const { return h * w; }

  template <class U>
  GridT<U> cast() const {
    GridT<U> out(h, w, c);
    out.data = data.template cast<U>();
    return out;
  }
};

using Grid = GridT<float>;

}  // namespace mmm
