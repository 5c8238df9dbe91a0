#include "fx.h"

int main(void)
{
    int fd = android_get_control_socket("dmagent");
    if (fd < 0)
        exit(1);
    return listen(fd, 4);
}
