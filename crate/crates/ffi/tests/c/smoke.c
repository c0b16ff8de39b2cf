#include <stdio.h>
#include <string.h>

#include "fednmt.h"

int main(void) {
    FednmtLabel *label = NULL;
    if (fednmt_label_parse("8E-8D/C-C (2-6)", &label) != FEDNMT_STATUS_OK) {
        return 1;
    }
    uint64_t c = 0, t = 0;
    if (fednmt_label_price(label, fednmt_cost_preset_full_scale(), &c, &t) != FEDNMT_STATUS_OK) {
        return 2;
    }
    fednmt_label_free(label);
    printf("C-Cost %llu T-Cost %llu\n", (unsigned long long)c, (unsigned long long)t);

    FednmtStatus st = fednmt_label_parse("not a label", &label);
    char msg[128];
    if (label != NULL || fednmt_last_error(msg, sizeof msg) == 0 || strlen(msg) == 0) {
        return 3;
    }
    printf("parse error %d\n", (int)st);
    return 0;
}
