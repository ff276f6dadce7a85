/* Flushes with clflushopt and clwb, including ones already followed by
 * a fence. */
#include <immintrin.h>
#include <stdint.h>
#include <stdio.h>

static uint64_t area[256] __attribute__((aligned(64)));

void write_opt(int i, uint64_t v)
{
	area[i] = v;
	_mm_clflushopt(&area[i]);
	_mm_sfence();
}

void write_wb(int i, uint64_t v)
{
	area[i] = v;
	_mm_clwb(&area[i]);
	_mm_sfence();
}

void write_legacy(int i, uint64_t v)
{
	area[i] = v;
	_mm_clflush(&area[i]);
}

int main(int argc, char **argv)
{
	(void)argv;
	uint64_t s = 0;
	for (int i = 0; i < 256; i++) {
		switch (i % 3) {
		case 0:
			write_opt(i, (uint64_t)i * 3 + (uint64_t)argc);
			break;
		case 1:
			write_wb(i, (uint64_t)i * 5);
			break;
		default:
			write_legacy(i, (uint64_t)i * 7);
		}
	}
	_mm_sfence();
	for (int i = 0; i < 256; i++)
		s = s * 33 + area[i];
	printf("%llu\n", (unsigned long long)s);
	return 0;
}
