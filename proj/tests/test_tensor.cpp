#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "test_utils.hpp"
#include "wdfq/tensor.hpp"
#include "wdfq/tensor_io.hpp"

using namespace wdfq;

TEST_CASE("tensor shape and indexing") {
  Tensor t({2, 3, 4, 5});
  CHECK(t.rank() == 4);
  CHECK(t.size() == 120);
  t.at(1, 2, 3, 4) = 7.0;
  CHECK(t[119] == 7.0);
  t.at(0, 0, 0, 1) = 3.0;
  CHECK(t[1] == 3.0);

  Tensor m({3, 4});
  m.at(2, 1) = 9.0;
  CHECK(m[9] == 9.0);
}

TEST_CASE("tensor shape validation") {
  CHECK_THROWS_AS(Tensor({0, 2}), Error);
  CHECK_THROWS_AS(Tensor({1, 2, 3, 4, 5}), Error);
  CHECK_THROWS_AS(Tensor({2}, {1.0}), Error);
  CHECK_THROWS_AS(Tensor({2, 2}).reshaped({3}), Error);
  CHECK(Tensor({2, 2}).reshaped({4}).rank() == 1);
}

TEST_CASE("tensor full and finite check") {
  Tensor t = Tensor::full({2, 2}, 1.5);
  CHECK(t[3] == 1.5);
  CHECK(t.all_finite());
  t[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("tensor file round trip is bitwise") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "wdfq_tensor_io_test";
  fs::create_directories(dir);
  const std::string path = (dir / "t.tensor").string();

  Tensor t = testutil::random_tensor({2, 3, 4, 4}, 11, "io.round", 5.0);
  t[0] = -0.0;
  t[1] = 1e-308;
  write_tensor(path, t);
  Tensor r = read_tensor(path);
  REQUIRE(r.shape() == t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i) {
    CHECK(std::memcmp(&r[i], &t[i], sizeof(double)) == 0);
  }
  fs::remove_all(dir);
}

TEST_CASE("tensor file rejects bad magic") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "wdfq_tensor_io_bad";
  fs::create_directories(dir);
  const std::string path = (dir / "bad.tensor").string();
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("NOTATNSR........", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(read_tensor(path), Error);
  CHECK_THROWS_AS(read_tensor((dir / "missing.tensor").string()), Error);
  fs::remove_all(dir);
}
