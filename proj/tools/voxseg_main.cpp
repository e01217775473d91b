#include <cstdio>

int main() {
  std::puts("voxseg: subcommands not wired up yet");
  return 3;
}
