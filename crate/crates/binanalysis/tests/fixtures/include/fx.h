/* Minimal declarations so fixtures build without a sysroot. */
#ifndef FX_H
#define FX_H

typedef unsigned long size_t;
typedef unsigned int socklen_t;
typedef unsigned int uid_t;
typedef unsigned int gid_t;
typedef unsigned int mode_t;
typedef int pid_t;

struct sockaddr_un {
    unsigned short sun_family;
    char sun_path[108];
};

struct ucred {
    pid_t pid;
    uid_t uid;
    gid_t gid;
};

#define AF_UNIX 1
#define SOCK_STREAM 1
#define SOL_SOCKET 1
#define SO_TYPE 3
#define SO_PEERCRED 17
#define SUN_OFF 2

#define ANDROID_SOCKET_NAMESPACE_ABSTRACT 0
#define ANDROID_SOCKET_NAMESPACE_RESERVED 1
#define ANDROID_SOCKET_NAMESPACE_FILESYSTEM 2

int socket(int, int, int);
int bind(int, const void *, socklen_t);
int listen(int, int);
int accept(int, void *, socklen_t *);
int close(int);
int getsockopt(int, int, int, void *, socklen_t *);

char *strcpy(char *, const char *);
char *strncpy(char *, const char *, size_t);
char *strcat(char *, const char *);
int snprintf(char *, size_t, const char *, ...);
int sprintf(char *, const char *, ...);
void *memcpy(void *, const void *, size_t);
void *memset(void *, int, size_t);
size_t strlen(const char *);
int strcmp(const char *, const char *);

char *getenv(const char *);
int atoi(const char *);
int open(const char *, int, ...);
long read(int, void *, size_t);
void exit(int);

mode_t umask(mode_t);
int chmod(const char *, mode_t);
int fchmod(int, mode_t);
int chown(const char *, uid_t, gid_t);
int fchown(int, uid_t, gid_t);
int seteuid(uid_t);
int setegid(gid_t);

int socket_local_server(const char *, int, int);
int socket_local_server_bind(int, const char *, int);
int android_get_control_socket(const char *);

struct listener { char opaque[64]; };
void FrameworkListener_new(struct listener *, const char *) __asm__("_ZN17FrameworkListenerC1EPKc");
void SocketListener_new(struct listener *, const char *, _Bool) __asm__("_ZN14SocketListenerC2EPKcb");
int listener_start(struct listener *) __asm__("_ZN14SocketListener14startListenerEv");

#endif
