//! Unicycle kinematics and box collision: a car on a constant turn traces a
//! circle of radius v/omega, and the box check flags the crossing car.

use trafficbots::dynamics::{collide, step, Action, AgentState, KindParams, Obb};

fn main() {
    let car = KindParams {
        max_accel: 4.0,
        max_decel: 8.0,
        max_yaw_rate: 1.0,
        max_speed: 30.0,
    };
    let (v, w) = (10.0, 0.5);
    let mut s = AgentState {
        v,
        ..AgentState::default()
    };
    let a = Action { accel: 0.0, yaw_rate: w };
    let mut pts = vec![(s.x, s.y)];
    for _ in 0..90 {
        s = step(&s, a, 0.1, &car).expect("finite state");
        pts.push((s.x, s.y));
    }
    // Circle through the first three points, then every point's radius.
    let ((x1, y1), (x2, y2), (x3, y3)) = (pts[0], pts[1], pts[2]);
    let d = 2.0 * (x1 * (y2 - y3) + x2 * (y3 - y1) + x3 * (y1 - y2));
    let (n1, n2, n3) = (x1 * x1 + y1 * y1, x2 * x2 + y2 * y2, x3 * x3 + y3 * y3);
    let cx = (n1 * (y2 - y3) + n2 * (y3 - y1) + n3 * (y1 - y2)) / d;
    let cy = (n1 * (x3 - x2) + n2 * (x1 - x3) + n3 * (x2 - x1)) / d;
    let worst = pts.iter().map(|(x, y)| ((x - cx).hypot(y - cy) - v / w).abs() / (v / w)).fold(0.0, f64::max);
    println!("radius {:.2} m, worst deviation over 9 s {:.4}%", v / w, worst * 100.0);

    let crossing = AgentState {
        x: 12.0,
        y: -12.0,
        theta: std::f64::consts::FRAC_PI_2,
        v: 8.0,
        ..AgentState::default()
    };
    let (mut me, mut other) = (AgentState { v: 8.0, ..AgentState::default() }, crossing);
    let hold = Action { accel: 0.0, yaw_rate: 0.0 };
    for t in 1..=40 {
        me = step(&me, hold, 0.1, &car).unwrap();
        other = step(&other, hold, 0.1, &car).unwrap();
        if collide(&Obb::new(me.pose(), 4.5, 2.0), &Obb::new(other.pose(), 4.5, 2.0)) {
            println!("boxes first overlap at t = {:.1} s, near ({:.1}, {:.1})", t as f64 * 0.1, me.x, me.y);
            return;
        }
    }
    println!("no overlap");
}
