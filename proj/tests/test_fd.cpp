#include <cmath>
#include <functional>

#include "doctest.h"
#include "moelab/fd_check.hpp"
#include "moelab/ops.hpp"

using namespace moelab;
using T = Tensor<double>;

TEST_CASE("fd_check on x squared: autodiff and FD both give 6 at x=3") {
    T x = T::scalar(3.0, true);
    std::function<T(Tape<double>&)> f = [&](Tape<double>& t) {
        return mul(t, x, x);
    };
    std::vector<T> params{x};
    FdReport rep = fd_check<double>(f, params, 1e-5);
    CHECK(rep.max_rel_err < 1e-9);

    Tape<double> tape;
    x.zero_grad();
    tape.backward(f(tape));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("fd_check on sum(softmax(x)): constant function, zero gradient") {
    T x = T::from({4}, {0.3, -1.2, 2.0, 0.7}, true);
    std::function<T(Tape<double>&)> f = [&](Tape<double>& t) {
        return sum(t, softmax(t, x));
    };

    Tape<double> tape;
    x.zero_grad();
    tape.backward(f(tape));
    for (int i = 0; i < 4; ++i) CHECK(std::abs(x.grad()[i]) < 1e-12);

    std::vector<T> params{x};
    FdReport rep = fd_check<double>(f, params, 1e-5);
    CHECK(rep.max_rel_err < 1e-2);  // noise over the 1e-8 denominator floor
}

TEST_CASE("fd_check rejects a non-positive step") {
    T x = T::scalar(1.0, true);
    std::function<T(Tape<double>&)> f = [&](Tape<double>& t) {
        return mul(t, x, x);
    };
    std::vector<T> params{x};
    CHECK_THROWS_AS(fd_check<double>(f, params, 0.0), NumericError);
}

TEST_CASE("fd_check reports the worst parameter and element") {
    T a = T::scalar(2.0, true);
    T b = T::from({2}, {1.0, -1.0}, true);
    std::function<T(Tape<double>&)> f = [&](Tape<double>& t) {
        return add(t, mul(t, a, a), sum(t, mul(t, b, b)));
    };
    std::vector<T> params{a, b};
    FdReport rep = fd_check<double>(f, params, 1e-4);
    CHECK(rep.max_rel_err < 1e-7);
    CHECK(rep.worst_param < 2);
    CHECK(rep.worst_index >= 0);
}
