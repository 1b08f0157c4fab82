//! Kernel transmit timestamps for outgoing TCP data.
//!
//! A clock read after `write` returns can land arbitrarily late when the
//! woken receiver preempts the sender, as happens on a loaded single core.
//! The kernel stamps the moment the last written byte is handed to the
//! device, which is the send-complete instant the benchmark wants.

use std::net::TcpStream;
use std::time::SystemTime;

#[cfg(all(
    target_os = "linux",
    any(
        target_arch = "x86_64",
        target_arch = "x86",
        target_arch = "aarch64",
        target_arch = "arm",
        target_arch = "riscv64"
    )
))]
mod imp {
    use std::mem::{size_of, size_of_val, zeroed};
    use std::net::TcpStream;
    use std::os::fd::AsRawFd;
    use std::time::{Duration, SystemTime, UNIX_EPOCH};

    const SO_TIMESTAMPING: libc::c_int = 37;
    const SCM_TIMESTAMPING: libc::c_int = SO_TIMESTAMPING;

    pub fn enable(stream: &TcpStream) -> bool {
        let flags: libc::c_uint = libc::SOF_TIMESTAMPING_TX_SOFTWARE
            | libc::SOF_TIMESTAMPING_SOFTWARE
            | libc::SOF_TIMESTAMPING_OPT_ID
            | libc::SOF_TIMESTAMPING_OPT_TSONLY;
        // SAFETY: valid fd and a c_uint option value of the advertised size.
        let rc = unsafe {
            libc::setsockopt(
                stream.as_raw_fd(),
                libc::SOL_SOCKET,
                SO_TIMESTAMPING,
                (&flags as *const libc::c_uint).cast(),
                size_of::<libc::c_uint>() as libc::socklen_t,
            )
        };
        rc == 0
    }

    pub fn latest(stream: &TcpStream) -> Option<SystemTime> {
        let fd = stream.as_raw_fd();
        let mut latest: Option<SystemTime> = None;
        loop {
            let mut data = [0u8; 64];
            let mut iov = libc::iovec {
                iov_base: data.as_mut_ptr().cast(),
                iov_len: data.len(),
            };
            let mut control = [0u64; 64];
            // SAFETY: msghdr is plain data; all pointers below outlive the call.
            let mut msg: libc::msghdr = unsafe { zeroed() };
            msg.msg_iov = &mut iov;
            msg.msg_iovlen = 1;
            msg.msg_control = control.as_mut_ptr().cast();
            msg.msg_controllen = size_of_val(&control) as _;
            // SAFETY: msg points at live buffers of the stated sizes.
            let n = unsafe { libc::recvmsg(fd, &mut msg, libc::MSG_ERRQUEUE | libc::MSG_DONTWAIT) };
            if n < 0 {
                return latest;
            }
            // SAFETY: CMSG_* walk the control buffer filled in by the kernel.
            let mut cmsg = unsafe { libc::CMSG_FIRSTHDR(&msg) };
            while !cmsg.is_null() {
                let hdr = unsafe { &*cmsg };
                if hdr.cmsg_level == libc::SOL_SOCKET && hdr.cmsg_type == SCM_TIMESTAMPING {
                    let ts: [libc::timespec; 3] =
                        unsafe { std::ptr::read_unaligned(libc::CMSG_DATA(cmsg).cast()) };
                    let t = UNIX_EPOCH + Duration::new(ts[0].tv_sec as u64, ts[0].tv_nsec as u32);
                    latest = Some(latest.map_or(t, |l| l.max(t)));
                }
                cmsg = unsafe { libc::CMSG_NXTHDR(&msg, cmsg) };
            }
        }
    }
}

#[cfg(not(all(
    target_os = "linux",
    any(
        target_arch = "x86_64",
        target_arch = "x86",
        target_arch = "aarch64",
        target_arch = "arm",
        target_arch = "riscv64"
    )
)))]
mod imp {
    use std::net::TcpStream;
    use std::time::SystemTime;

    pub fn enable(_: &TcpStream) -> bool {
        false
    }

    pub fn latest(_: &TcpStream) -> Option<SystemTime> {
        None
    }
}

/// Requests software transmit timestamps; false when unsupported.
pub fn enable(stream: &TcpStream) -> bool {
    imp::enable(stream)
}

/// Latest transmit timestamp queued since the last call, draining the queue.
pub fn latest(stream: &TcpStream) -> Option<SystemTime> {
    imp::latest(stream)
}
