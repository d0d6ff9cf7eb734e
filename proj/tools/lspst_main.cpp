#include <cstdio>

int main() {
  std::puts("lspst: subcommands pending");
  return 0;
}
