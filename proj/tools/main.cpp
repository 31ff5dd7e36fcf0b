#include <cstdio>

int main() {
  std::puts("revlm: CLI under construction");
  return 0;
}
