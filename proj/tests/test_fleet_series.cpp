#include <catch2/catch_amalgamated.hpp>

#include <gtrend/fleet_series.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;
using namespace gtrend;

namespace {

fs::path temp_file(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "gtrend_fleet_series_tests";
    fs::create_directories(dir);
    return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

} // namespace

TEST_CASE("iso8601 round trip") {
    CHECK(parse_iso8601("1970-01-01T00:00:00Z") == 0);
    CHECK(parse_iso8601("1970-01-02T00:00:00Z") == 86400);
    CHECK(format_iso8601(0) == "1970-01-01T00:00:00Z");
    const std::int64_t ts = parse_iso8601("2015-06-17T13:45:30Z");
    CHECK(format_iso8601(ts) == "2015-06-17T13:45:30Z");
    CHECK_THROWS(parse_iso8601("yesterday"));
}

TEST_CASE("samples_per_year from interval") {
    CHECK(samples_per_year_from_interval(86400) == 365);
    CHECK(samples_per_year_from_interval(900) == 35040);
    CHECK(samples_per_year_from_interval(kSecondsPerYear) == 1);
}

TEST_CASE("minimal two-node file loads") {
    const auto p = temp_file("minimal.csv");
    write_text(p,
               "system_id,timestamp,power\n"
               "a,1970-01-01T00:00:00Z,1.0\n"
               "a,1970-01-02T00:00:00Z,2.0\n"
               "a,1970-01-03T00:00:00Z,3.0\n"
               "b,1970-01-01T00:00:00Z,4.0\n"
               "b,1970-01-02T00:00:00Z,5.0\n"
               "b,1970-01-03T00:00:00Z,6.0\n");
    const FleetSeries s = load_fleet_csv(p.string());
    REQUIRE(s.n_nodes() == 2);
    REQUIRE(s.n_samples() == 3);
    CHECK(s.node_ids == std::vector<std::string>{"a", "b"});
    CHECK(s.values(0, 0) == 1.0);
    CHECK(s.values(1, 2) == 6.0);
    CHECK(s.samples_per_year == 365);
    CHECK_FALSE(s.locations.has_value());
}

TEST_CASE("rows may arrive unsorted") {
    const auto p = temp_file("unsorted.csv");
    write_text(p,
               "system_id,timestamp,power\n"
               "a,1970-01-02T00:00:00Z,2.0\n"
               "a,1970-01-01T00:00:00Z,1.0\n");
    const FleetSeries s = load_fleet_csv(p.string());
    CHECK(s.values(0, 0) == 1.0);
    CHECK(s.values(0, 1) == 2.0);
}

TEST_CASE("ragged grid names the offending node") {
    const auto p = temp_file("ragged.csv");
    write_text(p,
               "system_id,timestamp,power\n"
               "a,1970-01-01T00:00:00Z,1.0\n"
               "a,1970-01-02T00:00:00Z,2.0\n"
               "b,1970-01-01T00:00:00Z,3.0\n");
    CHECK_THROWS_WITH(load_fleet_csv(p.string()), Catch::Matchers::ContainsSubstring("'b'"));
}

TEST_CASE("missing columns rejected") {
    const auto p = temp_file("badheader.csv");
    write_text(p, "id,when,watts\nx,1970-01-01T00:00:00Z,1\n");
    CHECK_THROWS_WITH(load_fleet_csv(p.string()),
                      Catch::Matchers::ContainsSubstring("missing columns"));
}

TEST_CASE("unparsable value reports the row") {
    const auto p = temp_file("badvalue.csv");
    write_text(p,
               "system_id,timestamp,power\n"
               "a,1970-01-01T00:00:00Z,1.0\n"
               "a,1970-01-02T00:00:00Z,oops\n");
    CHECK_THROWS_WITH(load_fleet_csv(p.string()), Catch::Matchers::ContainsSubstring("row 3"));
}

TEST_CASE("locations pass through") {
    const auto p = temp_file("geo.csv");
    write_text(p,
               "system_id,timestamp,power,lat,lon\n"
               "a,1970-01-01T00:00:00Z,1.0,39.5,-105.0\n"
               "a,1970-01-02T00:00:00Z,2.0,39.5,-105.0\n"
               "b,1970-01-01T00:00:00Z,3.0,40.0,-104.5\n"
               "b,1970-01-02T00:00:00Z,4.0,40.0,-104.5\n");
    const FleetSeries s = load_fleet_csv(p.string());
    REQUIRE(s.locations.has_value());
    CHECK((*s.locations)(0, 0) == 39.5);
    CHECK((*s.locations)(1, 1) == -104.5);
}

TEST_CASE("inconsistent per-node location rejected") {
    const auto p = temp_file("geodrift.csv");
    write_text(p,
               "system_id,timestamp,power,lat,lon\n"
               "a,1970-01-01T00:00:00Z,1.0,39.5,-105.0\n"
               "a,1970-01-02T00:00:00Z,2.0,39.6,-105.0\n");
    CHECK_THROWS_WITH(load_fleet_csv(p.string()),
                      Catch::Matchers::ContainsSubstring("inconsistent lat/lon"));
}

TEST_CASE("write/load round trip preserves values") {
    FleetSeries s;
    s.node_ids = {"inv1", "inv2", "inv3"};
    s.timestamps = {0, 900, 1800};
    s.values.resize(3, 3);
    s.values << 1.0, 2.5, 3.25, -0.125, 1e-7, 99.75, 4.0, 5.0, 6.0625;
    Eigen::MatrixXd locs(3, 2);
    locs << 39.5, -105.0, 40.0, -104.5, 39.9, -105.2;
    s.locations = locs;
    s.samples_per_year = 35040;

    const auto p = temp_file("roundtrip.csv");
    write_fleet_csv(p.string(), s);
    const FleetSeries r = load_fleet_csv(p.string());
    REQUIRE(r.n_nodes() == 3);
    REQUIRE(r.n_samples() == 3);
    CHECK(r.node_ids == s.node_ids);
    CHECK(r.timestamps == s.timestamps);
    for (int l = 0; l < 3; ++l)
        for (int t = 0; t < 3; ++t)
            CHECK(r.values(l, t) == Catch::Approx(s.values(l, t)).epsilon(1e-9));
    REQUIRE(r.locations.has_value());
    CHECK((*r.locations - locs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("alternate value column name round trips") {
    FleetSeries s;
    s.node_ids = {"x"};
    s.timestamps = {0, 86400};
    s.values.resize(1, 2);
    s.values << 7.0, 8.0;
    const auto p = temp_file("rdpcol.csv");
    write_fleet_csv(p.string(), s, "rdp");
    std::ifstream in(p);
    std::string header;
    std::getline(in, header);
    CHECK(header == "system_id,timestamp,rdp");
    const FleetSeries r = load_fleet_csv(p.string());
    CHECK(r.values(0, 1) == 8.0);
}

TEST_CASE("validate rejects bad shapes and grids") {
    FleetSeries s;
    s.node_ids = {"a"};
    s.timestamps = {0, 100, 200};
    s.values = Eigen::MatrixXd::Zero(1, 3);

    SECTION("well-formed passes") { CHECK_NOTHROW(s.validate()); }
    SECTION("row count mismatch") {
        s.values = Eigen::MatrixXd::Zero(2, 3);
        CHECK_THROWS(s.validate());
    }
    SECTION("non-uniform grid") {
        s.timestamps = {0, 100, 250};
        CHECK_THROWS_WITH(s.validate(), Catch::Matchers::ContainsSubstring("not uniform"));
    }
    SECTION("decreasing timestamps") {
        s.timestamps = {200, 100, 0};
        CHECK_THROWS(s.validate());
    }
    SECTION("single sample") {
        s.timestamps = {0};
        s.values = Eigen::MatrixXd::Zero(1, 1);
        CHECK_THROWS(s.validate());
    }
}
