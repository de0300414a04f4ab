#include <catch2/catch_amalgamated.hpp>

#include <gtrend/trend_outputs.hpp>

#include <cmath>

using namespace gtrend;

TEST_CASE("the estimated pattern aliases the aging term") {
    Decomposition d;
    d.h_a = Eigen::MatrixXd::Constant(2, 3, 7.0);
    d.h_f.push_back(Eigen::MatrixXd::Random(2, 3));
    CHECK(&extract_edp(d) == &d.h_a);
    CHECK(extract_edp(d)(1, 2) == 7.0);
}

TEST_CASE("annual rate of a fixed-ratio exponential is the ratio itself") {
    const int s = 12;
    const int t = 5 * s;
    Eigen::RowVectorXd row(t);
    for (int i = 0; i < t; ++i)
        row(i) = 100.0 * std::pow(0.99, static_cast<double>(i) / s);
    CHECK(global_plr(row, s) == Catch::Approx(-1.0).margin(1e-9));
}

TEST_CASE("annual rate of a constant series is zero") {
    const Eigen::RowVectorXd row = Eigen::RowVectorXd::Constant(30, 42.0);
    CHECK(global_plr(row, 7) == 0.0);
}

TEST_CASE("annual rate of a short linear series matches enumeration") {
    const int s = 4, t = 8;
    Eigen::RowVectorXd row(t);
    for (int i = 0; i < t; ++i) row(i) = 100.0 * (1.0 - 0.01 * i / s);

    const double want =
        -100.0 * (1.0 / 100.0 + 1.0 / 99.75 + 1.0 / 99.5 + 1.0 / 99.25) / 4.0;
    CHECK(global_plr(row, s) == Catch::Approx(want).epsilon(1e-12));
    CHECK(global_plr(row, s) == Catch::Approx(-1.00377201658882).epsilon(1e-9));
}

TEST_CASE("annual rate is invariant to uniform scaling") {
    Eigen::RowVectorXd row(10);
    row << 5, 4.9, 4.95, 4.8, 4.82, 4.7, 4.75, 4.6, 4.66, 4.5;
    CHECK(global_plr(3.7 * row, 3) == Catch::Approx(global_plr(row, 3)).epsilon(1e-12));
}

TEST_CASE("annual rate input validation") {
    const Eigen::RowVectorXd row = Eigen::RowVectorXd::Constant(8, 1.0);
    CHECK_THROWS_AS(global_plr(row, 8), std::invalid_argument);
    CHECK_THROWS_AS(global_plr(row, 9), std::invalid_argument);
    CHECK_THROWS_AS(global_plr(row, 0), std::invalid_argument);
    CHECK_NOTHROW(global_plr(row, 7));

    Eigen::RowVectorXd with_zero = row;
    with_zero(2) = 0.0;
    CHECK_THROWS_AS(global_plr(with_zero, 7), std::domain_error);
}

TEST_CASE("fleet report averages the per-node rates") {
    const int s = 4, t = 12;
    Eigen::MatrixXd edp(2, t);
    for (int i = 0; i < t; ++i) {
        edp(0, i) = 100.0 * std::pow(0.99, static_cast<double>(i) / s);
        edp(1, i) = 80.0 * std::pow(0.97, static_cast<double>(i) / s);
    }
    const PlrReport r = make_plr_report(edp, s);
    REQUIRE(r.per_node_plr.size() == 2);
    CHECK(r.per_node_plr(0) == Catch::Approx(global_plr(edp.row(0), s)).epsilon(1e-15));
    CHECK(r.per_node_plr(1) == Catch::Approx(global_plr(edp.row(1), s)).epsilon(1e-15));
    CHECK(r.fleet_mean_plr ==
          Catch::Approx((r.per_node_plr(0) + r.per_node_plr(1)) / 2.0).epsilon(1e-15));
    CHECK((r.edp - edp).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("percent error of a perfect estimate is zero") {
    const Eigen::MatrixXd rdp = Eigen::MatrixXd::Random(3, 5).array() + 2.0;
    CHECK(mape(rdp, rdp) == 0.0);
}

TEST_CASE("percent error of a ten percent overshoot is ten") {
    const Eigen::MatrixXd rdp = Eigen::MatrixXd::Random(3, 5).array() + 2.0;
    CHECK(mape(1.1 * rdp, rdp) == Catch::Approx(10.0).epsilon(1e-9));
}

TEST_CASE("percent error matches a brute-force enumeration") {
    Eigen::MatrixXd edp(2, 3), rdp(2, 3);
    edp << 1.0, 2.0, 3.0, 4.0, 5.0, 6.0;
    rdp << 2.0, 2.0, 2.0, 5.0, 5.0, 5.0;
    const double want = 100.0 *
                        (0.5 / 2 + 0.0 / 2 + 1.0 / 2 + 1.0 / 5 + 0.0 / 5 + 1.0 / 5) / 6.0;
    CHECK(mape(edp, rdp) == Catch::Approx(want).epsilon(1e-15));
}

TEST_CASE("percent error input validation") {
    const Eigen::MatrixXd a = Eigen::MatrixXd::Ones(2, 3);
    CHECK_THROWS_AS(mape(a, Eigen::MatrixXd::Ones(2, 4)), std::invalid_argument);
    Eigen::MatrixXd z = a;
    z(1, 1) = 0.0;
    CHECK_THROWS_AS(mape(a, z), std::domain_error);
}

TEST_CASE("scaled distance ignores per-node amplitude") {
    Eigen::MatrixXd rdp(2, 4);
    rdp << 100, 99, 98, 97, 80, 79, 78, 77;
    Eigen::MatrixXd edp = rdp;
    edp.row(0) *= 3.0;
    edp.row(1) *= 0.25;
    CHECK(scaled_ed(edp, rdp) < 1e-12);
}

TEST_CASE("scaled distance matches a hand example") {
    Eigen::MatrixXd edp(1, 2), rdp(1, 2);
    edp << 1.0, 2.0;
    rdp << 1.0, 1.0;
    CHECK(scaled_ed(edp, rdp) == Catch::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("scaled distance input validation") {
    Eigen::MatrixXd a = Eigen::MatrixXd::Ones(1, 3);
    CHECK_THROWS_AS(scaled_ed(a, Eigen::MatrixXd::Ones(2, 3)), std::invalid_argument);
    Eigen::MatrixXd z = a;
    z(0, 0) = 0.0;
    CHECK_THROWS_AS(scaled_ed(a, z), std::domain_error);
    CHECK_THROWS_AS(scaled_ed(z, a), std::domain_error);
}

TEST_CASE("moving average of a constant is the constant") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Constant(2, 9, 5.5);
    const Eigen::MatrixXd y = moving_average_oracle(x, 5);
    CHECK((y - x).cwiseAbs().maxCoeff() < 1e-12);
    const Eigen::MatrixXd full = moving_average_oracle(x, 9);
    CHECK((full - x).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("moving average keeps linear interiors and replicates edges") {
    Eigen::MatrixXd x(1, 6);
    x << 0, 1, 2, 3, 4, 5;
    const Eigen::MatrixXd y = moving_average_oracle(x, 3);
    for (int i = 1; i < 5; ++i) CHECK(y(0, i) == Catch::Approx(x(0, i)).epsilon(1e-15));
    CHECK(y(0, 0) == Catch::Approx((0.0 + 0.0 + 1.0) / 3.0).epsilon(1e-15));
    CHECK(y(0, 5) == Catch::Approx((4.0 + 5.0 + 5.0) / 3.0).epsilon(1e-15));
}

TEST_CASE("moving average window validation") {
    const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(1, 8);
    CHECK_THROWS_AS(moving_average_oracle(x, 4), std::invalid_argument);
    CHECK_THROWS_AS(moving_average_oracle(x, 1), std::invalid_argument);
    CHECK_THROWS_AS(moving_average_oracle(x, 9), std::invalid_argument);
    CHECK_NOTHROW(moving_average_oracle(x, 7));
}
